#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <cstdio>

#include "illume/checkpoint.hpp"
#include "illume/image.hpp"
#include "illume/optim.hpp"
#include "gradcheck.hpp"

using namespace illume;

namespace {

Parameter<double>& add_randn(ParamStore<double>& ps, const std::string& name,
                             std::vector<idx> dims, Rng& rng,
                             double stddev = 1.0) {
  auto& p = ps.add(name, std::move(dims));
  fill_normal(p.value, rng, stddev);
  return p;
}

}  // namespace

TEST_CASE("tensor storage semantics") {
  Tensor<double> a({2, 3});
  a.array().setLinSpaced(6, 0.0, 5.0);
  Tensor<double> shallow = a;
  shallow[0] = 42.0;
  CHECK(a[0] == 42.0);
  Tensor<double> deep = a.clone();
  deep[0] = -1.0;
  CHECK(a[0] == 42.0);
  Tensor<double> r = a.reshaped({3, 2});
  r[5] = 7.0;
  CHECK(a[5] == 7.0);
  CHECK(a.mat().rows() == 2);
  CHECK(a.mat().cols() == 3);
  CHECK(a.mat(3, 2)(2, 1) == a[5]);
  CHECK_THROWS_AS(a.reshaped({4, 2}), DomainError);
  Tensor<float> f = a.cast<float>();
  CHECK(f[1] == doctest::Approx(a[1]));
}

TEST_CASE("rng determinism and distributions") {
  Rng a(7), b(7), c(8);
  for (int i = 0; i < 100; ++i) {
    double u = a.uniform();
    CHECK(u == b.uniform());
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
  }
  CHECK(a.uniform() != c.uniform());

  Rng r(0);
  Rng f1 = r.fork(1);
  Rng f2 = r.fork(2);
  CHECK(f1.uniform() != f2.uniform());

  Rng n(3);
  double sum = 0, sq = 0;
  const int count = 20000;
  for (int i = 0; i < count; ++i) {
    double x = n.normal();
    sum += x;
    sq += x * x;
  }
  CHECK(std::abs(sum / count) < 0.03);
  CHECK(std::abs(sq / count - 1.0) < 0.05);

  auto perm = Rng(5).permutation(100);
  std::vector<bool> hit(100, false);
  for (auto v : perm) hit[static_cast<std::size_t>(v)] = true;
  for (bool h : hit) CHECK(h);
}

TEST_CASE("elementwise op gradients") {
  Rng rng(11);
  ParamStore<double> ps;
  auto& x = add_randn(ps, "x", {3, 4}, rng);
  auto& y = add_randn(ps, "y", {3, 4}, rng);
  auto fn = [&]() {
    Var<double> vx = use(x), vy = use(y);
    Var<double> h = add(mul(silu(vx), tanh_fn(vy)), sigmoid_fn(sub(vx, vy)));
    h = add_scalar(scale(square(h), 0.5), 0.25);
    return mean_all(h);
  };
  CHECK(max_rel_err(fn, {&x, &y}) < 1e-6);
}

TEST_CASE("relu gradient away from the kink") {
  Rng rng(12);
  ParamStore<double> ps;
  auto& x = add_randn(ps, "x", {4, 4}, rng);
  // keep all entries well away from zero so the finite difference is clean
  x.value.array() = x.value.array().sign() * (x.value.array().abs() + 0.5);
  auto fn = [&]() { return sum_all(relu(use(x))); };
  CHECK(max_rel_err(fn, {&x}) < 1e-6);
}

TEST_CASE("matmul family gradients") {
  Rng rng(13);
  ParamStore<double> ps;
  auto& a = add_randn(ps, "a", {3, 4}, rng);
  auto& b = add_randn(ps, "b", {4, 5}, rng);
  auto& bt = add_randn(ps, "bt", {5, 4}, rng);
  auto& bias = add_randn(ps, "bias", {5}, rng);
  auto fn = [&]() {
    Var<double> m1 = matmul(use(a), use(b));
    Var<double> m2 = matmul_nt(use(a), use(bt));
    return mean_all(square(add_rowvec(add(m1, m2), use(bias))));
  };
  CHECK(max_rel_err(fn, {&a, &b, &bt, &bias}) < 1e-6);
}

TEST_CASE("row and column op gradients") {
  Rng rng(14);
  ParamStore<double> ps;
  auto& table = add_randn(ps, "table", {6, 3}, rng);
  auto& vals = add_randn(ps, "vals", {2, 3}, rng);
  auto& vec = add_randn(ps, "vec", {3}, rng);
  auto fn = [&]() {
    Var<double> g = gather_rows(use(table), {0, 2, 2, 5});
    Var<double> o = overwrite_rows(use(table), {1, 4}, use(vals));
    Var<double> t = tile_rows(use(vec), 6);
    Var<double> cat = concat_cols(o, t);
    Var<double> s = slice_rows(slice_cols(cat, 1, 4), 1, 4);
    return add(mean_all(square(s)), mean_all(square(g)));
  };
  CHECK(max_rel_err(fn, {&table, &vals, &vec}) < 1e-6);
}

TEST_CASE("straight-through estimator is exact identity for gradients") {
  Rng rng(15);
  ParamStore<double> ps;
  auto& f = add_randn(ps, "f", {4, 2}, rng);
  Tensor<double> q = Tensor<double>::randn({4, 2}, rng);
  Var<double> vf = use(f);
  Var<double> st = straight_through(vf, Var<double>::constant(q));
  for (idx i = 0; i < q.numel(); ++i) CHECK(st.value()[i] == q[i]);
  Var<double> loss = sum_all(mul(st, Var<double>::constant(q)));
  loss.backward();
  // d(sum(st * q))/df = q, passed through untouched
  for (idx i = 0; i < q.numel(); ++i) CHECK(f.grad[i] == q[i]);
}

TEST_CASE("conv2d gradients across stride and padding") {
  Rng rng(16);
  const std::vector<std::array<idx, 3>> cases{
      {3, 1, 1}, {4, 2, 1}, {1, 1, 0}, {3, 2, 0}};
  for (auto [k, stride, pad] : cases) {
    ParamStore<double> ps;
    auto& x = add_randn(ps, "x", {2, 5, 6, 3}, rng);
    auto& w = add_randn(ps, "w", {k, k, 3, 2}, rng, 0.5);
    auto& b = add_randn(ps, "b", {2}, rng);
    auto fn = [&]() {
      return mean_all(square(conv2d(use(x), use(w), use(b), {stride, pad})));
    };
    CHECK(max_rel_err(fn, {&x, &w, &b}) < 1e-5);
  }
}

TEST_CASE("conv2d matches a hand computation") {
  // 1x1 input, 1x1 kernel: y = w*x + b
  ParamStore<double> ps;
  auto& x = ps.add("x", {1, 1, 1, 1});
  auto& w = ps.add("w", {1, 1, 1, 1});
  auto& b = ps.add("b", {1});
  x.value[0] = 3.0;
  w.value[0] = 2.0;
  b.value[0] = 0.5;
  CHECK(conv2d(use(x), use(w), use(b)).value()[0] == doctest::Approx(6.5));
}

TEST_CASE("spatial rearrangement ops") {
  Rng rng(17);
  ParamStore<double> ps;
  auto& x = add_randn(ps, "x", {2, 4, 6, 3}, rng);

  Var<double> s2c = space_to_channel(use(x), 2);
  CHECK(s2c.value().dims() == std::vector<idx>{2, 2, 3, 12});
  Var<double> back = channel_to_space(s2c, 2);
  for (idx i = 0; i < x.value.numel(); ++i)
    CHECK(back.value()[i] == x.value[i]);

  Var<double> up = upsample_nearest(use(x), 2);
  CHECK(up.value().dims() == std::vector<idx>{2, 8, 12, 3});
  // every source pixel appears 4x
  CHECK(up.value().array().sum() ==
        doctest::Approx(4.0 * x.value.array().sum()));

  auto fn = [&]() {
    Var<double> v = upsample_nearest(channel_to_space(
        space_to_channel(use(x), 2), 2), 2);
    return mean_all(square(v));
  };
  CHECK(max_rel_err(fn, {&x}) < 1e-6);
}

TEST_CASE("normalization gradients and statistics") {
  Rng rng(18);
  ParamStore<double> ps;
  auto& x = add_randn(ps, "x", {3, 6}, rng);
  auto& g = add_randn(ps, "g", {6}, rng, 0.3);
  auto& b = add_randn(ps, "b", {6}, rng, 0.3);
  g.value.array() += 1.0;
  auto fn = [&]() { return mean_all(square(layer_norm(use(x), use(g), use(b)))); };
  CHECK(max_rel_err(fn, {&x, &g, &b}) < 1e-5);

  ParamStore<double> ps2;
  auto& xi = add_randn(ps2, "x", {2, 3, 4, 6}, rng);
  auto& gi = add_randn(ps2, "g", {6}, rng, 0.3);
  auto& bi = add_randn(ps2, "b", {6}, rng, 0.3);
  gi.value.array() += 1.0;
  auto fn2 = [&]() {
    return mean_all(square(group_norm(use(xi), 3, use(gi), use(bi))));
  };
  CHECK(max_rel_err(fn2, {&xi, &gi, &bi}) < 1e-5);

  // unit affine -> per-group mean 0, var 1
  ParamStore<double> ps3;
  auto& gu = ps3.add("g", {6});
  auto& bu = ps3.add("b", {6});
  gu.value.array().setConstant(1.0);
  Var<double> y = group_norm(Var<double>::constant(xi.value), 2, use(gu), use(bu));
  auto ym = y.value().mat(2 * 3 * 4, 6);
  double mu = ym.leftCols(3).topRows(12).mean();
  double var = (ym.leftCols(3).topRows(12).array() - mu).square().mean();
  CHECK(mu == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("softmax rows and causal masking") {
  Rng rng(19);
  ParamStore<double> ps;
  auto& x = add_randn(ps, "x", {4, 4}, rng);
  Var<double> sm = softmax_rows(use(x));
  for (idx i = 0; i < 4; ++i)
    CHECK(sm.value().mat().row(i).sum() == doctest::Approx(1.0));
  Var<double> cm = causal_softmax(use(x));
  for (idx i = 0; i < 4; ++i) {
    CHECK(cm.value().mat().row(i).sum() == doctest::Approx(1.0));
    for (idx j = i + 1; j < 4; ++j) CHECK(cm.value().mat()(i, j) == 0.0);
  }
  auto& m = add_randn(ps, "m", {4, 4}, rng);
  auto fn = [&]() {
    return mean_all(mul(softmax_rows(use(x)), use(m)));
  };
  CHECK(max_rel_err(fn, {&x, &m}) < 1e-6);
  auto fn2 = [&]() {
    return mean_all(mul(causal_softmax(use(x)), use(m)));
  };
  CHECK(max_rel_err(fn2, {&x, &m}) < 1e-6);
}

TEST_CASE("cross entropy values, masking law and gradient") {
  ParamStore<double> ps;
  auto& logits = ps.add("l", {3, 7});
  std::vector<idx> targets{1, 4, 6};
  // uniform logits: loss = ln V at every position
  Var<double> ce = cross_entropy(use(logits), targets, {1, 1, 1});
  CHECK(ce.item() == doctest::Approx(std::log(7.0)));

  // peaked logits drive the loss toward zero
  for (std::size_t i = 0; i < targets.size(); ++i)
    logits.value.mat()(static_cast<idx>(i), targets[i]) = 30.0;
  CHECK(cross_entropy(use(logits), targets, {1, 1, 1}).item() ==
        doctest::Approx(0.0).epsilon(1e-9));

  // masking: mean over the two selected rows only
  Rng rng(20);
  fill_normal(logits.value, rng, 1.0);
  double full01 = cross_entropy(use(logits), targets, {1, 1, 0}).item();
  double row0 = cross_entropy(use(logits), targets, {1, 0, 0}).item();
  double row1 = cross_entropy(use(logits), targets, {0, 1, 0}).item();
  CHECK(full01 == doctest::Approx(0.5 * (row0 + row1)));

  auto fn = [&]() { return cross_entropy(use(logits), targets, {1, 0, 1}); };
  CHECK(max_rel_err(fn, {&logits}) < 1e-6);
  CHECK_THROWS_AS(cross_entropy(use(logits), {1, 9, 0}, {1, 1, 1}),
                  DomainError);
}

TEST_CASE("reconstruction loss gradients") {
  Rng rng(21);
  ParamStore<double> ps;
  auto& a = add_randn(ps, "a", {4, 5}, rng);
  auto& b = add_randn(ps, "b", {4, 5}, rng);
  auto fn_mse = [&]() { return mse_loss(use(a), use(b)); };
  CHECK(max_rel_err(fn_mse, {&a, &b}) < 1e-6);
  auto fn_l1 = [&]() { return l1_loss(use(a), use(b)); };
  CHECK(max_rel_err(fn_l1, {&a, &b}) < 1e-6);
  auto fn_cos = [&]() { return cosine_loss(use(a), use(b)); };
  CHECK(max_rel_err(fn_cos, {&a, &b}) < 1e-5);

  // identical rows: zero loss; opposite rows: loss 2
  Var<double> same = cosine_loss(use(a), use(a));
  CHECK(same.item() == doctest::Approx(0.0).epsilon(1e-12));
  Var<double> opp = cosine_loss(use(a), scale(use(a), -3.0));
  CHECK(opp.item() == doctest::Approx(2.0));

  // zero-norm rows count and contribute cosine 0
  long zeros = 0;
  Tensor<double> az = a.value.clone();
  az.mat().row(1).setZero();
  Var<double> z = cosine_loss(Var<double>::constant(az),
                              Var<double>::constant(b.value), &zeros);
  CHECK(zeros == 1);
  CHECK(z.item() > 0.0);
}

TEST_CASE("rotary encodings rotate without changing norms") {
  Rng rng(22);
  ParamStore<double> ps;
  auto& x = add_randn(ps, "x", {5, 8}, rng);

  Var<double> r0 = rope1d(use(x), {0, 0, 0, 0, 0}, 2);
  for (idx i = 0; i < x.value.numel(); ++i)
    CHECK(r0.value()[i] == doctest::Approx(x.value[i]));

  Var<double> r = rope1d(use(x), {0, 1, 2, 3, 4}, 2);
  for (idx i = 0; i < 5; ++i)
    CHECK(r.value().mat().row(i).norm() ==
          doctest::Approx(x.value.mat().row(i).norm()));

  auto fn = [&]() {
    return mean_all(square(rope1d(use(x), {0, 1, 2, 3, 4}, 2)));
  };
  CHECK(max_rel_err(fn, {&x}) < 1e-6);

  auto fn2 = [&]() {
    return mean_all(square(rope2d(use(x), {0, 0, 1, 1, 2}, {0, 1, 0, 1, 0}, 1)));
  };
  CHECK(max_rel_err(fn2, {&x}) < 1e-6);
  // rope1d squeezes the same angles out of rope2d when both axes agree
  Var<double> a2 = rope2d(use(x), {3, 1, 4, 1, 5}, {3, 1, 4, 1, 5}, 2);
  CHECK(a2.value().all_finite());
}

TEST_CASE("attention and transformer block gradients") {
  Rng rng(23);
  ParamStore<double> ps;
  TransformerBlock<double> blk(ps, "blk", 8, 2, rng);
  auto& x = add_randn(ps, "x", {4, 8}, rng, 0.5);
  std::vector<idx> pos{0, 1, 2, 3};
  auto fn = [&]() {
    auto hook = [&pos](Var<double> v) { return rope1d(v, pos, 2); };
    return mean_all(square(blk(use(x), true, hook)));
  };
  std::vector<Parameter<double>*> params{&x};
  for (const auto& p : ps.items())
    if (p->name != "x") params.push_back(p.get());
  CHECK(max_rel_err(fn, params) < 1e-5);
}

TEST_CASE("resnet block gradient") {
  Rng rng(24);
  ParamStore<double> ps;
  ResnetBlock<double> blk(ps, "rb", 4, 6, 2, rng);
  auto& x = add_randn(ps, "x", {1, 3, 3, 4}, rng, 0.5);
  auto fn = [&]() { return mean_all(square(blk(use(x)))); };
  std::vector<Parameter<double>*> params;
  for (const auto& p : ps.items()) params.push_back(p.get());
  CHECK(max_rel_err(fn, params) < 1e-5);
}

TEST_CASE("adam holds zero-gradient entries bitwise still") {
  ParamStore<float> ps;
  auto& p = ps.add("emb", {4, 3});
  Rng rng(25);
  fill_normal(p.value, rng, 1.0);
  Tensor<float> before = p.value.clone();
  Adam<float> opt({0.01, 0.9, 0.999, 1e-8});
  for (int step = 0; step < 5; ++step) {
    ps.zero_grad();
    // gradient only on rows 0 and 2
    p.grad.mat().row(0).setConstant(1.0f);
    p.grad.mat().row(2).setConstant(-0.5f);
    opt.step(ps);
  }
  for (idx j = 0; j < 3; ++j) {
    CHECK(p.value.mat()(1, j) == before.mat()(1, j));
    CHECK(p.value.mat()(3, j) == before.mat()(3, j));
    CHECK(p.value.mat()(0, j) != before.mat()(0, j));
  }

  // frozen parameters are skipped entirely
  p.trainable = false;
  Tensor<float> frozen = p.value.clone();
  p.grad.array().setConstant(1.0f);
  opt.step(ps);
  for (idx i = 0; i < p.value.numel(); ++i) CHECK(p.value[i] == frozen[i]);
}

TEST_CASE("adam minimizes a quadratic") {
  ParamStore<float> ps;
  auto& p = ps.add("x", {8});
  Rng rng(26);
  fill_normal(p.value, rng, 2.0);
  Adam<float> opt({0.05, 0.9, 0.999, 1e-8});
  for (int step = 0; step < 400; ++step) {
    ps.zero_grad();
    Var<float> loss = mean_all(square(use(p)));
    loss.backward();
    opt.step(ps);
  }
  CHECK(mean_all(square(use(p))).item() < 1e-4);
}

TEST_CASE("checkpoint roundtrip and hash pinning") {
  Rng rng(27);
  ParamStore<float> ps;
  auto& w = ps.add("layer.w", {3, 4});
  auto& b = ps.add("layer.b", {4});
  fill_normal(w.value, rng, 1.0);
  fill_normal(b.value, rng, 1.0);
  std::vector<NamedTensor<float>> extra{
      {"kind", Tensor<float>::full({1}, 2.0f)}};
  const std::string path = "/tmp/illume_test_ckpt.ntc";
  save_checkpoint(path, ps, 0xabcdull, extra);

  ParamStore<float> ps2;
  ps2.add("layer.w", {3, 4});
  ps2.add("layer.b", {4});
  auto got_extra = load_checkpoint(path, ps2, 0xabcdull);
  REQUIRE(got_extra.size() == 1);
  CHECK(got_extra[0].name == "kind");
  CHECK(got_extra[0].value[0] == 2.0f);
  for (idx i = 0; i < w.value.numel(); ++i)
    CHECK(ps2.at("layer.w").value[i] == w.value[i]);

  CHECK_THROWS_AS(load_checkpoint(path, ps2, 0x9999ull), IoError);
  CHECK_NOTHROW(load_checkpoint(path, ps2, 0x9999ull, true));

  ParamStore<float> missing;
  missing.add("layer.w", {3, 4});
  missing.add("other", {2});
  CHECK_THROWS_AS(load_checkpoint(path, missing, 0xabcdull), IoError);
  std::remove(path.c_str());
}

TEST_CASE("png roundtrip") {
  Rng rng(28);
  Tensor<float> img({5, 7, 3});
  for (idx i = 0; i < img.numel(); ++i)
    img[i] = static_cast<float>(rng.uniform());
  const std::string path = "/tmp/illume_test_img.png";
  save_png(path, img);
  Tensor<float> back = load_png(path);
  REQUIRE(back.dims() == img.dims());
  for (idx i = 0; i < img.numel(); ++i)
    CHECK(std::abs(back[i] - img[i]) <= 0.5f / 255.0f + 1e-6f);
  std::remove(path.c_str());
}

TEST_CASE("no-grad mode builds no graph") {
  ParamStore<double> ps;
  auto& p = ps.add("p", {2, 2});
  p.value.array().setConstant(1.0);
  NoGradGuard ng;
  Var<double> y = mean_all(square(use(p)));
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node()->parents.empty());
}
