#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "dgsan/autograd.hpp"
#include "dgsan/gradcheck.hpp"

using namespace dgsan;
using ag::Var;

namespace {

Tensor rand_t(Shape s, std::mt19937_64& rng, double scale = 1.0) {
  Tensor t(std::move(s));
  std::uniform_real_distribution<double> d(-scale, scale);
  for (auto& v : t.data) v = d(rng);
  return t;
}

}  // namespace

TEST_CASE("matmul matches a hand example and its gradient is exact") {
  Var a = ag::leaf(Tensor::from({2, 2}, {1, 2, 3, 4}), true);
  Var b = ag::leaf(Tensor::from({2, 2}, {5, 6, 7, 8}), true);
  Var c = ag::matmul(a, b);
  CHECK(c->value[0] == doctest::Approx(19));
  CHECK(c->value[1] == doctest::Approx(22));
  CHECK(c->value[2] == doctest::Approx(43));
  CHECK(c->value[3] == doctest::Approx(50));

  std::mt19937_64 rng(7);
  const Tensor w = rand_t({2, 2}, rng);
  auto rep = check_gradients([&] { return ag::weighted_sum(ag::matmul(a, b), w); }, {a, b});
  CHECK(rep.max_rel_err < 1e-7);
}

TEST_CASE("core elementwise ops pass finite-difference checks") {
  std::mt19937_64 rng(11);
  Var x = ag::leaf(rand_t({3, 4}, rng), true);
  const Tensor w = rand_t({3, 4}, rng);

  auto check = [&](auto make) {
    for (auto& v : x->value.data) {  // keep away from kinks
      if (std::abs(v) < 1e-3) v += 0.01;
    }
    auto rep = check_gradients([&] { return ag::weighted_sum(make(), w); }, {x});
    CHECK(rep.max_rel_err < 1e-6);
  };
  check([&] { return ag::relu(x); });
  check([&] { return ag::leaky_relu(x, 0.2); });
  check([&] { return ag::sigmoid(x); });
  check([&] { return ag::gelu(x); });
  check([&] { return ag::softmax_rows(x); });
}

TEST_CASE("softmax rows sum to one") {
  std::mt19937_64 rng(13);
  Var x = ag::constant(rand_t({5, 7}, rng, 3.0));
  Var s = ag::softmax_rows(x);
  for (int r = 0; r < 5; ++r) {
    double sum = 0;
    for (int c = 0; c < 7; ++c) sum += s->value[r * 7 + c];
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("layer_norm_rows normalizes and differentiates") {
  std::mt19937_64 rng(17);
  Var x = ag::leaf(rand_t({2, 6}, rng), true);
  Var g = ag::leaf(Tensor({6}, 1.0), true);
  Var b = ag::leaf(Tensor({6}), true);
  Var y = ag::layer_norm_rows(x, g, b);
  for (int r = 0; r < 2; ++r) {
    double mean = 0, var = 0;
    for (int c = 0; c < 6; ++c) mean += y->value[r * 6 + c];
    mean /= 6;
    for (int c = 0; c < 6; ++c) var += (y->value[r * 6 + c] - mean) * (y->value[r * 6 + c] - mean);
    CHECK(mean == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(var / 6 == doctest::Approx(1.0).epsilon(1e-4));
  }
  const Tensor w = rand_t({2, 6}, rng);
  auto rep = check_gradients([&] { return ag::weighted_sum(ag::layer_norm_rows(x, g, b), w); },
                             {x, g, b});
  CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("conv3d matches a brute-force oracle and gradchecks") {
  std::mt19937_64 rng(19);
  Var x = ag::leaf(rand_t({2, 3, 4, 4}, rng), true);
  Var w = ag::leaf(rand_t({3, 2, 3, 3, 3}, rng), true);
  Var b = ag::leaf(rand_t({3}, rng), true);
  const int stride[3] = {1, 2, 2}, pad[3] = {1, 1, 1};
  Var y = ag::conv3d(x, w, b, stride, pad);
  REQUIRE(y->value.shape == Shape{3, 3, 2, 2});

  // direct 7-loop convolution
  auto at = [&](const Tensor& t, int c, int d, int h, int wd, int D, int H, int W) {
    return t.data[((static_cast<size_t>(c) * D + d) * H + h) * W + wd];
  };
  for (int co = 0; co < 3; ++co)
    for (int od = 0; od < 3; ++od)
      for (int oh = 0; oh < 2; ++oh)
        for (int ow = 0; ow < 2; ++ow) {
          double acc = b->value[co];
          for (int ci = 0; ci < 2; ++ci)
            for (int kd = 0; kd < 3; ++kd)
              for (int kh = 0; kh < 3; ++kh)
                for (int kw = 0; kw < 3; ++kw) {
                  const int id = od * stride[0] + kd - pad[0];
                  const int ih = oh * stride[1] + kh - pad[1];
                  const int iw = ow * stride[2] + kw - pad[2];
                  if (id < 0 || ih < 0 || iw < 0 || id >= 3 || ih >= 4 || iw >= 4) continue;
                  const double wv =
                      w->value.data[(((static_cast<size_t>(co) * 2 + ci) * 3 + kd) * 3 + kh) * 3 +
                                    kw];
                  acc += wv * at(x->value, ci, id, ih, iw, 3, 4, 4);
                }
          CHECK(at(y->value, co, od, oh, ow, 3, 2, 2) == doctest::Approx(acc).epsilon(1e-10));
        }

  const Tensor ww = rand_t({3, 3, 2, 2}, rng);
  auto rep = check_gradients(
      [&] { return ag::weighted_sum(ag::conv3d(x, w, b, stride, pad), ww); }, {x, w, b});
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("depthwise_conv3d gradchecks") {
  std::mt19937_64 rng(23);
  Var x = ag::leaf(rand_t({3, 2, 3, 3}, rng), true);
  Var w = ag::leaf(rand_t({3, 3, 3, 3}, rng), true);
  Var b = ag::leaf(rand_t({3}, rng), true);
  const Tensor ww = rand_t({3, 2, 3, 3}, rng);
  auto rep = check_gradients(
      [&] { return ag::weighted_sum(ag::depthwise_conv3d(x, w, b), ww); }, {x, w, b});
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("structural ops round-trip and gradcheck") {
  std::mt19937_64 rng(29);
  Var x = ag::leaf(rand_t({4, 3}, rng), true);

  SUBCASE("gather_rows inverse permutation restores order") {
    Var g = ag::gather_rows(x, {2, 0, 3, 1});
    Var back = ag::gather_rows(g, {1, 3, 0, 2});
    for (int64_t i = 0; i < x->value.numel(); ++i)
      CHECK(back->value[i] == doctest::Approx(x->value[i]));
  }
  SUBCASE("concat/slice are inverses") {
    Var a = ag::slice_rows(x, 0, 2);
    Var b = ag::slice_rows(x, 2, 4);
    Var cat = ag::concat_rows({a, b});
    for (int64_t i = 0; i < x->value.numel(); ++i)
      CHECK(cat->value[i] == doctest::Approx(x->value[i]));
  }
  SUBCASE("gradients flow through gather/concat/slice/reshape") {
    const Tensor w = rand_t({4, 3}, rng);
    auto rep = check_gradients(
        [&] {
          Var g = ag::gather_rows(x, {3, 1, 0, 2});
          Var cat = ag::concat_rows({ag::slice_rows(g, 0, 1), ag::slice_rows(g, 1, 4)});
          return ag::weighted_sum(ag::reshape(cat, {4, 3}), w);
        },
        {x});
    CHECK(rep.max_rel_err < 1e-7);
  }
}

TEST_CASE("tokens_to_map / map_to_tokens / extract_patches agree on layout") {
  std::mt19937_64 rng(31);
  Var m = ag::leaf(rand_t({3, 2, 2, 2}, rng), true);
  Var t = ag::map_to_tokens(m);
  REQUIRE(t->value.shape == Shape{8, 3});
  // token n = (d,h,w) lexicographic; column c = channel
  for (int d = 0; d < 2; ++d)
    for (int h = 0; h < 2; ++h)
      for (int w = 0; w < 2; ++w)
        for (int c = 0; c < 3; ++c) {
          const int n = (d * 2 + h) * 2 + w;
          CHECK(t->value[n * 3 + c] ==
                doctest::Approx(m->value[((c * 2 + d) * 2 + h) * 2 + w]));
        }
  Var back = ag::tokens_to_map(t, 2, 2, 2);
  for (int64_t i = 0; i < m->value.numel(); ++i)
    CHECK(back->value[i] == doctest::Approx(m->value[i]));

  Var vol = ag::leaf(rand_t({4, 4, 4}, rng), true);
  Var patches = ag::extract_patches(vol, 2, 2, 2);
  REQUIRE(patches->value.shape == Shape{8, 8});
  // patch (1,0,1), voxel offset (0,1,0) -> volume voxel (2,1,2)
  CHECK(patches->value[5 * 8 + 2] == doctest::Approx(vol->value[(2 * 4 + 1) * 4 + 2]));

  const Tensor w = rand_t({8, 8}, rng);
  auto rep =
      check_gradients([&] { return ag::weighted_sum(ag::extract_patches(vol, 2, 2, 2), w); },
                      {vol});
  CHECK(rep.max_rel_err < 1e-7);
}

TEST_CASE("pooling and channel ops gradcheck") {
  std::mt19937_64 rng(37);
  Var x = ag::leaf(rand_t({3, 2, 4, 4}, rng), true);
  Var gate = ag::leaf(rand_t({1, 3}, rng), true);

  Var gap = ag::global_avg_pool(x);
  REQUIRE(gap->value.shape == Shape{1, 3});
  double mean0 = 0;
  for (int i = 0; i < 32; ++i) mean0 += x->value[i];
  CHECK(gap->value[0] == doctest::Approx(mean0 / 32));

  Var pooled = ag::avg_pool_halve(x);
  REQUIRE(pooled->value.shape == Shape{3, 1, 2, 2});

  const Tensor w1 = rand_t({3, 1, 2, 2}, rng);
  auto rep1 = check_gradients([&] { return ag::weighted_sum(ag::avg_pool_halve(x), w1); }, {x});
  CHECK(rep1.max_rel_err < 1e-7);

  const Tensor w2 = rand_t({3, 2, 4, 4}, rng);
  auto rep2 = check_gradients(
      [&] { return ag::weighted_sum(ag::scale_channels(x, ag::sigmoid(gate)), w2); }, {x, gate});
  CHECK(rep2.max_rel_err < 1e-6);

  Var y = ag::leaf(rand_t({2, 2, 4, 4}, rng), true);
  const Tensor w3 = rand_t({5, 2, 4, 4}, rng);
  auto rep3 = check_gradients(
      [&] { return ag::weighted_sum(ag::channel_concat({x, y}), w3); }, {x, y});
  CHECK(rep3.max_rel_err < 1e-7);
}

TEST_CASE("layer_norm_channels gradchecks") {
  std::mt19937_64 rng(41);
  Var x = ag::leaf(rand_t({4, 1, 2, 2}, rng), true);
  Var g = ag::leaf(Tensor({4}, 1.0), true);
  Var b = ag::leaf(Tensor({4}), true);
  const Tensor w = rand_t({4, 1, 2, 2}, rng);
  auto rep = check_gradients(
      [&] { return ag::weighted_sum(ag::layer_norm_channels(x, g, b), w); }, {x, g, b});
  CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("outer_add and diag behave and differentiate") {
  Var u = ag::leaf(Tensor::from({2, 1}, {1, 2}), true);
  Var v = ag::leaf(Tensor::from({3, 1}, {10, 20, 30}), true);
  Var o = ag::outer_add(u, v);
  REQUIRE(o->value.shape == Shape{2, 3});
  CHECK(o->value[0] == doctest::Approx(11));
  CHECK(o->value[5] == doctest::Approx(32));

  Var dv = ag::leaf(Tensor::from({1, 3}, {1, 2, 3}), true);
  Var d = ag::diag(dv);
  CHECK(d->value[0] == doctest::Approx(1));
  CHECK(d->value[4] == doctest::Approx(2));
  CHECK(d->value[1] == doctest::Approx(0));

  std::mt19937_64 rng(43);
  const Tensor w = rand_t({2, 3}, rng);
  auto rep = check_gradients([&] { return ag::weighted_sum(ag::outer_add(u, v), w); }, {u, v});
  CHECK(rep.max_rel_err < 1e-7);
}

TEST_CASE("cross_entropy_logits hand values and mean decomposition") {
  Var z = ag::leaf(Tensor::from({1, 2}, {0, 0}), true);
  CHECK(ag::cross_entropy_logits(z, {0})->value[0] == doctest::Approx(std::log(2.0)));

  Var sat = ag::constant(Tensor::from({1, 2}, {20, -20}));
  CHECK(ag::cross_entropy_logits(sat, {0})->value[0] < 1e-8);

  std::mt19937_64 rng(47);
  Var batch = ag::leaf(rand_t({2, 2}, rng, 2.0), true);
  const double l0 =
      ag::cross_entropy_logits(ag::slice_rows(batch, 0, 1), {1})->value[0];
  const double l1 =
      ag::cross_entropy_logits(ag::slice_rows(batch, 1, 2), {0})->value[0];
  const double lb = ag::cross_entropy_logits(batch, {1, 0})->value[0];
  CHECK(lb == doctest::Approx((l0 + l1) / 2).epsilon(1e-12));

  auto rep = check_gradients([&] { return ag::cross_entropy_logits(batch, {1, 0}); }, {batch});
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("backward seed scales gradients linearly") {
  Var x = ag::leaf(Tensor::from({1, 2}, {1.0, 2.0}), true);
  Var y = ag::mean_all(ag::mul(x, x));
  ag::backward(y, 1.0);
  const double g1 = x->grad[0];
  x->zero_grad();
  ag::backward(ag::mean_all(ag::mul(x, x)), 0.25);
  CHECK(x->grad[0] == doctest::Approx(0.25 * g1));
}
