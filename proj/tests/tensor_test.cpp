// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"
#include "test_util.hpp"
#include "vptta/tensor.hpp"

#include <filesystem>

using namespace vptta;

TEST_CASE("tensor payload length matches shape") {
  Tensor t({2, 3, 4});
  CHECK(t.size() == 24);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>(3)), ConfigError);
  CHECK_THROWS_AS(t.reshaped({5, 5}), ConfigError);
  CHECK(t.reshaped({4, 6}).shape() == Shape{4, 6});
}

TEST_CASE("vpt header layout") {
  Tensor t({2, 1}, std::vector<double>{1.5, -2.0});
  const auto bytes = encode_vpt(t);
  REQUIRE(bytes.size() == 4 + 4 + 2 * 4 + 2 * 8);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "VPT1");
  CHECK(bytes[4] == 2);
  CHECK(bytes[8] == 2);
  CHECK(bytes[12] == 1);
  CHECK(decode_vpt(bytes) == t);
}

TEST_CASE("vpt file round trip is bit exact") {
  std::mt19937_64 rng(3);
  const auto t = testing::random_tensor({3, 4, 5}, rng, -1e6, 1e6);
  const auto path = std::filesystem::temp_directory_path() / "vptta_tensor_test.vpt";
  write_vpt(path, t);
  CHECK(read_vpt(path) == t);
  std::filesystem::remove(path);
}

TEST_CASE("vpt rejects corrupt input") {
  std::vector<std::uint8_t> junk{'N', 'O', 'P', 'E', 0, 0, 0, 0};
  CHECK_THROWS_AS(decode_vpt(junk), ConfigError);
  auto bytes = encode_vpt(Tensor({3}, 1.0));
  bytes.pop_back();
  CHECK_THROWS_AS(decode_vpt(bytes), ConfigError);
}

TEST_CASE("checksum sees single-bit changes") {
  Tensor a({4}, 1.0);
  auto b = a;
  b[2] = std::nextafter(1.0, 2.0);
  CHECK(checksum(a.data()) != checksum(b.data()));
  CHECK(checksum(a.data()) == checksum(Tensor({4}, 1.0).data()));
}
