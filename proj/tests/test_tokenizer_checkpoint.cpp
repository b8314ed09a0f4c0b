#include "doctest.h"

#include "sdvlm/checkpoint.hpp"
#include "sdvlm/tokenizer.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

using namespace sdvlm;

TEST_CASE("specials occupy the first five ids in fixed order") {
  Tokenizer tk({"red", "blue"});
  CHECK(tk.id(Tokenizer::kBos) == 0);
  CHECK(tk.id(Tokenizer::kEos) == 1);
  CHECK(tk.id(Tokenizer::kPad) == 2);
  CHECK(tk.id(Tokenizer::kImg) == 3);
  CHECK(tk.id(Tokenizer::kSep) == 4);
  CHECK(tk.vocab_size() == 7);
  CHECK(tk.token(5) == "blue");  // corpus words sorted after specials
  CHECK(tk.token(6) == "red");
}

TEST_CASE("punctuation splits off as standalone tokens") {
  auto ws = Tokenizer::split_words("Question: how many red squares?");
  CHECK(ws == std::vector<std::string>{"Question", ":", "how", "many", "red", "squares", "?"});
  CHECK(Tokenizer::split_words("[INST] hi [/INST]") ==
        std::vector<std::string>{"[INST]", "hi", "[/INST]"});
  CHECK(Tokenizer::split_words("  a,b  ") == std::vector<std::string>{"a,b"});
  CHECK(Tokenizer::split_words("a, b.") == std::vector<std::string>{"a", ",", "b", "."});
}

TEST_CASE("encode/decode round-trips token ids") {
  Tokenizer tk = Tokenizer::from_corpus({"how many red squares ?", "there are two ."});
  auto ids = tk.encode("how many red squares ? there are two .");
  CHECK(tk.encode(tk.decode(ids)) == ids);
  CHECK(tk.decode({tk.id("two")}) == "two");
}

TEST_CASE("unknown words and bad ids throw") {
  Tokenizer tk({"red"});
  CHECK_THROWS_AS(tk.id("green"), std::invalid_argument);
  CHECK_THROWS_AS(tk.encode("red green"), std::invalid_argument);
  CHECK_THROWS_AS(tk.token(99), std::invalid_argument);
  CHECK_THROWS_AS(tk.token(-1), std::invalid_argument);
}

TEST_CASE("decode skips specials unless asked not to") {
  Tokenizer tk({"hi"});
  std::vector<int> ids = {tk.bos(), tk.id("hi"), tk.eos()};
  CHECK(tk.decode(ids) == "hi");
  CHECK(tk.decode(ids, false) == "<bos> hi <eos>");
}

TEST_CASE("vocabulary order is independent of word list order") {
  Tokenizer a({"red", "blue", "green"});
  Tokenizer b({"green", "red", "blue", "red"});
  CHECK(a.vocab() == b.vocab());
}

TEST_CASE("checkpoint round-trips bitwise") {
  Checkpoint ck;
  ck.meta = R"({"d_model":8,"note":"round trip"})";
  ck.add("emb", Dims{2, 3}, {1.0, -0.0, 3.5e-300, 4.0, 5.0, 6.25});
  ck.add("bias", Dims{3}, {0.1, 0.2, 0.3});
  ck.add("scalar", Dims{}, {42.0});

  std::string path = "ck_roundtrip.bin";
  save_checkpoint(path, ck);
  Checkpoint lo = load_checkpoint(path);

  CHECK(lo.version == ck.version);
  CHECK(lo.meta == ck.meta);
  REQUIRE(lo.tensors.size() == ck.tensors.size());
  for (size_t i = 0; i < ck.tensors.size(); ++i) {
    CHECK(lo.tensors[i].name == ck.tensors[i].name);
    CHECK(lo.tensors[i].dims == ck.tensors[i].dims);
    REQUIRE(lo.tensors[i].data.size() == ck.tensors[i].data.size());
    CHECK(std::memcmp(lo.tensors[i].data.data(), ck.tensors[i].data.data(),
                      ck.tensors[i].data.size() * sizeof(double)) == 0);
  }
  CHECK(checkpoint_checksum(lo) == checkpoint_checksum(ck));
  std::remove(path.c_str());
}

TEST_CASE("checksum changes when any weight changes") {
  Checkpoint ck;
  ck.add("w", Dims{2}, {1.0, 2.0});
  uint64_t before = checkpoint_checksum(ck);
  ck.tensors[0].data[1] = 2.0000000001;
  CHECK(checkpoint_checksum(ck) != before);
}

TEST_CASE("corrupt and truncated files are rejected") {
  Checkpoint ck;
  ck.meta = "m";
  ck.add("w", Dims{2}, {1.0, 2.0});
  std::string path = "ck_corrupt.bin";
  save_checkpoint(path, ck);

  // flip one payload byte
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(10);
    char c;
    f.seekg(10);
    f.get(c);
    f.seekp(10);
    f.put(char(c ^ 0x1));
  }
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);

  save_checkpoint(path, ck);
  {
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), std::streamsize(bytes.size() / 2));
  }
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);

  CHECK_THROWS_AS(load_checkpoint("does_not_exist.bin"), std::runtime_error);
  std::remove(path.c_str());
}

TEST_CASE("find and require behave on missing tensors") {
  Checkpoint ck;
  ck.add("w", Dims{1}, {1.0});
  CHECK(ck.find("w") != nullptr);
  CHECK(ck.find("nope") == nullptr);
  CHECK_THROWS_AS(ck.require("nope"), std::runtime_error);
  CHECK_THROWS_AS(ck.add("bad", Dims{3}, {1.0}), std::invalid_argument);
}
