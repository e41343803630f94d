#include <doctest.h>

#include "useg/tensor.hpp"

using namespace useg;

TEST_CASE("indexing round-trip over all coordinates") {
  Tensor<float> t({2, 3, 4, 5});
  float v = 0.5f;
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int h = 0; h < 4; ++h)
        for (int w = 0; w < 5; ++w) t.at(n, c, h, w) = v += 1.0f;
  v = 0.5f;
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int h = 0; h < 4; ++h)
        for (int w = 0; w < 5; ++w) CHECK(t.at(n, c, h, w) == (v += 1.0f));
  // row-major with W fastest: (n,c,h,w) -> ((n*C+c)*H+h)*W+w
  CHECK(t.index(1, 2, 3, 4) == ((1 * 3 + 2) * 4 + 3) * 5 + 4);
}

TEST_CASE("shape validation") {
  CHECK_THROWS_AS(Tensor<float>({0, 1, 1, 1}), ShapeError);
  CHECK_THROWS_AS(Tensor<float>({1, 1, 2, 2}, std::vector<float>{1.f, 2.f}),
                  ShapeError);
}

TEST_CASE("elementwise basics") {
  SUBCASE("mul by scalar zero annihilates") {
    Tensor<float> a = ones<float>({1, 2, 2, 2});
    Tensor<float> z({1, 1, 1, 1}, 0.0f);
    Tensor<float> r = mul(a, z);
    for (std::int64_t i = 0; i < r.size(); ++i) CHECK(r[i] == 0.0f);
  }
  SUBCASE("add zeros is the identity bit-exact") {
    Rng rng(3);
    Tensor<float> x = uniform_tensor<float>({2, 3, 4, 4}, rng, -2.0, 2.0);
    Tensor<float> r = add(x, zeros_like(x));
    CHECK(bit_equal(r, x));
  }
  SUBCASE("mask multiply per element") {
    Tensor<float> a({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor<float> m({1, 1, 2, 2}, {1, 0, 0, 1});
    Tensor<float> r = mul(a, m);
    CHECK(r[0] == 1.0f);
    CHECK(r[1] == 0.0f);
    CHECK(r[2] == 0.0f);
    CHECK(r[3] == 4.0f);
  }
}

TEST_CASE("broadcast cases") {
  Rng rng(11);
  Tensor<float> x = uniform_tensor<float>({2, 3, 4, 4}, rng);

  SUBCASE("spatial mask (N,1,H,W)") {
    Tensor<float> m = uniform_tensor<float>({2, 1, 4, 4}, rng);
    Tensor<float> r = mul(x, m);
    CHECK(r.shape() == x.shape());
    CHECK(r.at(1, 2, 3, 3) == doctest::Approx(x.at(1, 2, 3, 3) * m.at(1, 0, 3, 3)));
  }
  SUBCASE("channel vector (N,C,1,1)") {
    Tensor<float> v = uniform_tensor<float>({2, 3, 1, 1}, rng);
    Tensor<float> r = add(x, v);
    CHECK(r.at(0, 2, 1, 1) == doctest::Approx(x.at(0, 2, 1, 1) + v.at(0, 2, 0, 0)));
  }
  SUBCASE("scalar (1,1,1,1)") {
    Tensor<float> s({1, 1, 1, 1}, 2.5f);
    Tensor<float> r = sub(x, s);
    CHECK(r.at(1, 0, 0, 0) == doctest::Approx(x.at(1, 0, 0, 0) - 2.5f));
  }
  SUBCASE("all-ones spatial mask is the identity") {
    Tensor<float> m = ones<float>({2, 1, 4, 4});
    CHECK(bit_equal(mul(x, m), x));
  }
  SUBCASE("unsupported broadcast names both shapes") {
    Tensor<float> bad({1, 3, 4, 4});
    try {
      mul(x, bad);
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      std::string msg = e.what();
      CHECK(msg.find("(2,3,4,4)") != std::string::npos);
      CHECK(msg.find("(1,3,4,4)") != std::string::npos);
    }
  }
}

TEST_CASE("concat_channels") {
  SUBCASE("three 16-channel parts make 48 channels") {
    std::vector<Tensor<float>> parts(3, Tensor<float>({1, 16, 8, 8}, 1.0f));
    Tensor<float> r = concat_channels(parts);
    CHECK(r.shape() == Shape4{1, 48, 8, 8});
  }
  SUBCASE("singleton is the identity bit-exact") {
    Rng rng(5);
    Tensor<float> x = uniform_tensor<float>({2, 4, 3, 3}, rng);
    CHECK(bit_equal(concat_channels<float>({x}), x));
  }
  SUBCASE("mismatched spatial size throws") {
    std::vector<Tensor<float>> parts{Tensor<float>({1, 2, 4, 4}),
                                     Tensor<float>({1, 2, 4, 5})};
    CHECK_THROWS_AS(concat_channels(parts), ShapeError);
  }
}

TEST_CASE("split_channels") {
  SUBCASE("48 channels split three ways") {
    Tensor<float> x({1, 48, 16, 16});
    auto parts = split_channels(x, 3);
    REQUIRE(parts.size() == 3);
    for (const auto& p : parts) CHECK(p.shape() == Shape4{1, 16, 16, 16});
  }
  SUBCASE("k=1 is the identity bit-exact") {
    Rng rng(7);
    Tensor<float> x = uniform_tensor<float>({1, 4, 2, 2}, rng);
    auto parts = split_channels(x, 1);
    REQUIRE(parts.size() == 1);
    CHECK(bit_equal(parts[0], x));
  }
  SUBCASE("index arithmetic on (1,6,1,1)") {
    Tensor<float> x({1, 6, 1, 1}, {0, 1, 2, 3, 4, 5});
    auto parts = split_channels(x, 3);
    CHECK(parts[0][0] == 0.0f);
    CHECK(parts[0][1] == 1.0f);
    CHECK(parts[1][0] == 2.0f);
    CHECK(parts[1][1] == 3.0f);
    CHECK(parts[2][0] == 4.0f);
    CHECK(parts[2][1] == 5.0f);
  }
  SUBCASE("non-divisible channel count throws") {
    Tensor<float> x({1, 7, 2, 2});
    CHECK_THROWS_AS(split_channels(x, 3), ValueError);
  }
  SUBCASE("split then concat restores the tensor bit-exact for every divisor") {
    Rng rng(9);
    Tensor<float> x = uniform_tensor<float>({1, 12, 4, 4}, rng);
    for (int k : {1, 2, 3, 4, 6, 12}) {
      CHECK(bit_equal(concat_channels(split_channels(x, k)), x));
    }
  }
}

TEST_CASE("channel_mean") {
  SUBCASE("constant stays constant at (N,1,H,W)") {
    Tensor<float> x({2, 5, 3, 3}, 2.25f);
    Tensor<float> r = channel_mean(x);
    CHECK(r.shape() == Shape4{2, 1, 3, 3});
    for (std::int64_t i = 0; i < r.size(); ++i)
      CHECK(r[i] == doctest::Approx(2.25f));
  }
  SUBCASE("(2+4)/2 = 3") {
    Tensor<float> x({1, 2, 1, 1}, {2, 4});
    CHECK(channel_mean(x)[0] == doctest::Approx(3.0f));
  }
  SUBCASE("bottleneck gate shape") {
    Tensor<float> x({1, 96, 16, 16});
    CHECK(channel_mean(x).shape() == Shape4{1, 1, 16, 16});
  }
}

TEST_CASE("rng determinism") {
  Rng a(42), b(42), c(43);
  Tensor<float> ta = uniform_tensor<float>({1, 2, 3, 3}, a);
  Tensor<float> tb = uniform_tensor<float>({1, 2, 3, 3}, b);
  Tensor<float> tc = uniform_tensor<float>({1, 2, 3, 3}, c);
  CHECK(bit_equal(ta, tb));
  CHECK(!bit_equal(ta, tc));

  SUBCASE("forked streams are order independent") {
    Rng base(7);
    double v3 = base.fork(3).uniform();
    double v5 = base.fork(5).uniform();
    Rng base2(7);
    CHECK(base2.fork(5).uniform() == v5);
    CHECK(base2.fork(3).uniform() == v3);
  }
}

TEST_CASE("permute_channels and batch concat") {
  Tensor<float> x({1, 4, 1, 1}, {10, 11, 12, 13});
  Tensor<float> p = permute_channels(x, {0, 2, 1, 3});
  CHECK(p[0] == 10.0f);
  CHECK(p[1] == 12.0f);
  CHECK(p[2] == 11.0f);
  CHECK(p[3] == 13.0f);

  Tensor<float> a({1, 2, 1, 1}, {1, 2});
  Tensor<float> b({2, 2, 1, 1}, {3, 4, 5, 6});
  Tensor<float> r = concat_batch<float>({a, b});
  CHECK(r.shape() == Shape4{3, 2, 1, 1});
  CHECK(r[0] == 1.0f);
  CHECK(r[5] == 6.0f);
}
