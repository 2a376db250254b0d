#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "dsdlab/divergences.hpp"
#include "dsdlab/error.hpp"
#include "dsdlab/rng.hpp"
#include "dsdlab/seq2seq.hpp"
#include "helpers.hpp"

using namespace dsdlab;

namespace {

Seq2SeqConfig tiny(std::uint64_t seed = 5) {
  Seq2SeqConfig c;
  c.source_vocab = 9;
  c.target_vocab = 7;
  c.embed_dim = 3;
  c.hidden_dim = 4;
  c.attention_dim = 5;
  c.max_source_length = 8;
  c.max_target_length = 8;
  c.seed = seed;
  c.init_scale = 0.5;
  return c;
}

using Vec = std::vector<double>;

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// x * W + b for a row vector x, straight from the tensor entries.
Vec affine(const Vec& x, const Tensor& w, const Tensor& b) {
  Vec out(w.cols());
  for (std::size_t j = 0; j < w.cols(); ++j) {
    double s = b[j];
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * w(i, j);
    out[j] = s;
  }
  return out;
}

Vec join(const Vec& a, const Vec& b) {
  Vec out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

Vec embedding(const Tensor& table, Token t) { return testing::row_of(table, t); }

// Reference GRU: z = s(W_z[x;h]), r = s(W_r[x;h]), n = tanh(W_n[x; r*h]), h' = (1-z)n + z h.
Vec gru(const Seq2SeqParams& p, std::size_t first, const Vec& x, const Vec& h) {
  const Vec xh = join(x, h);
  const Vec z = affine(xh, p.tensors[first], p.tensors[first + 1]);
  const Vec r = affine(xh, p.tensors[first + 2], p.tensors[first + 3]);
  Vec rh(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) rh[i] = sig(r[i]) * h[i];
  const Vec n = affine(join(x, rh), p.tensors[first + 4], p.tensors[first + 5]);
  Vec out(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) {
    const double zi = sig(z[i]), ni = std::tanh(n[i]);
    out[i] = (1 - zi) * ni + zi * h[i];
  }
  return out;
}

struct Reference {
  std::vector<Vec> annotations;
  Vec initial;
};

Reference reference_encode(const Seq2SeqParams& p, const Sentence& src) {
  const std::size_t h = p.config.hidden_dim, m = src.size();
  std::vector<Vec> fwd(m), bwd(m);
  Vec s(h, 0.0);
  for (std::size_t i = 0; i < m; ++i) fwd[i] = s = gru(p, kEncFwdZ, embedding(p[kSourceEmbedding], src[i]), s);
  s.assign(h, 0.0);
  for (std::size_t i = m; i-- > 0;) bwd[i] = s = gru(p, kEncBwdZ, embedding(p[kSourceEmbedding], src[i]), s);
  Reference r;
  for (std::size_t i = 0; i < m; ++i) r.annotations.push_back(join(fwd[i], bwd[i]));
  r.initial = affine(bwd[0], p[kInitState], p[kInitStateBias]);
  for (double& v : r.initial) v = std::tanh(v);
  return r;
}

struct RefStep {
  Vec state, probs, alpha, context;
};

RefStep reference_step(const Seq2SeqParams& p, Token prev, const Vec& s, const std::vector<Vec>& ann) {
  const Vec q = affine(s, p[kAttnState], p[kAttnBias]);
  Vec score(ann.size());
  for (std::size_t i = 0; i < ann.size(); ++i) {
    Vec zero(p.config.attention_dim, 0.0);
    const Vec k = affine(ann[i], p[kAttnAnnotation], Tensor::matrix(1, p.config.attention_dim));
    double e = 0.0;
    for (std::size_t a = 0; a < k.size(); ++a) e += std::tanh(k[a] + q[a]) * p[kAttnScore](a, 0);
    score[i] = e;
  }
  RefStep out;
  out.alpha = testing::naive_softmax(score);
  out.context.assign(ann[0].size(), 0.0);
  for (std::size_t i = 0; i < ann.size(); ++i)
    for (std::size_t d = 0; d < ann[i].size(); ++d) out.context[d] += out.alpha[i] * ann[i][d];
  const Vec emb = embedding(p[kTargetEmbedding], prev);
  out.state = gru(p, kDecZ, join(emb, out.context), s);
  out.probs = testing::naive_softmax(affine(join(join(out.state, out.context), emb), p[kOutput], p[kOutputBias]));
  return out;
}

Tensor row_tensor(const Vec& v) { return Tensor({1, v.size()}, v); }

ForwardTrace run(Tape& tape, const Seq2SeqParams& p, const Batch& b, bool trainable = false) {
  ParamVars pv = bind_params(tape, p, trainable);
  return forward_teacher_forced(tape, pv, p.config, b);
}

}  // namespace

TEST_CASE("init params") {
  const Seq2SeqParams a = init_params(tiny()), b = init_params(tiny());
  CHECK(a.tensors == b.tensors);
  CHECK(init_params(tiny(6)).tensors != a.tensors);
  Seq2SeqConfig smoke = tiny();
  smoke.embed_dim = 2;
  smoke.hidden_dim = 2;
  smoke.attention_dim = 2;
  const Seq2SeqParams s = init_params(smoke);
  CHECK_NOTHROW(check_params(s));
  for (const auto& t : s.tensors)
    for (double v : t.data()) {
      CHECK(v >= -0.5);
      CHECK(v <= 0.5);
    }
  Seq2SeqConfig def;
  for (const auto& t : init_params(def).tensors)
    for (double v : t.data()) CHECK(std::abs(v) <= 0.08);
  Seq2SeqParams broken = a;
  broken.tensors[kOutput] = Tensor::matrix(2, 2);
  CHECK_THROWS_AS(check_params(broken), DimensionError);
}

TEST_CASE("encoder matches a two-pass scalar reference") {
  const Seq2SeqParams p = init_params(tiny());
  const Sentence src{4, 7, 5, 8};
  const Annotations a = encode(p, src);
  const Reference r = reference_encode(p, src);
  REQUIRE(a.vectors.rows() == 4);
  REQUIRE(a.vectors.cols() == 8);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t d = 0; d < 8; ++d) CHECK(a.vectors(i, d) == doctest::Approx(r.annotations[i][d]).epsilon(1e-12));
  for (std::size_t d = 0; d < 4; ++d) CHECK(a.initial_state[d] == doctest::Approx(r.initial[d]).epsilon(1e-12));

  // With shared direction weights, the backward states of x are the forward
  // states of reversed x in reverse order.
  Seq2SeqParams shared = p;
  for (std::size_t k = 0; k < 6; ++k) shared.tensors[kEncFwdZ + k] = shared.tensors[kEncBwdZ + k];
  const Annotations x = encode(shared, src);
  const Annotations rev = encode(shared, Sentence(src.rbegin(), src.rend()));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t d = 0; d < 4; ++d) CHECK(x.vectors(i, 4 + d) == doctest::Approx(rev.vectors(3 - i, d)).epsilon(1e-12));
}

TEST_CASE("encoder shapes and degenerate inputs") {
  const Seq2SeqParams p = init_params(tiny());
  const Annotations one = encode(p, {5});
  CHECK(one.vectors.rows() == 1);
  CHECK(one.vectors.cols() == 8);
  CHECK_THROWS_AS(encode(p, {kPad}), DataError);
  CHECK_THROWS_AS(encode(p, {}), DataError);
  CHECK_THROWS_AS(encode(p, {4, 99}), DataError);
}

TEST_CASE("attention") {
  const Seq2SeqParams p = init_params(tiny());
  Rng rng(1);
  const Tensor s = testing::random_matrix(rng, 1, 4);

  const Tensor single = testing::random_matrix(rng, 1, 8);
  const Attention a1 = attend(p, s, single);
  CHECK(a1.weights[0] == 1.0);
  for (std::size_t d = 0; d < 8; ++d) CHECK(a1.context[d] == doctest::Approx(single[d]).epsilon(1e-15));

  Tensor same = Tensor::matrix(3, 8);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t d = 0; d < 8; ++d) same(i, d) = single[d];
  const Attention a2 = attend(p, s, same);
  for (std::size_t i = 0; i < 3; ++i) CHECK(a2.weights[i] == doctest::Approx(1.0 / 3).epsilon(1e-14));

  const Tensor ann = testing::random_matrix(rng, 5, 8);
  const Attention a3 = attend(p, s, ann);
  std::vector<Vec> rows;
  for (std::size_t i = 0; i < 5; ++i) rows.push_back(testing::row_of(ann, i));
  const RefStep ref = reference_step(p, kBos, testing::row_of(s, 0), rows);
  double total = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    total += a3.weights[i];
    CHECK(a3.weights[i] == doctest::Approx(ref.alpha[i]).epsilon(1e-12));
  }
  CHECK(std::abs(total - 1.0) < 1e-9);
  for (std::size_t d = 0; d < 8; ++d) {
    double c = 0.0;
    for (std::size_t i = 0; i < 5; ++i) c += a3.weights[i] * ann(i, d);
    CHECK(a3.context[d] == doctest::Approx(c).epsilon(1e-12));
  }
  CHECK_THROWS_AS(attend(p, s, testing::random_matrix(rng, 2, 6)), DimensionError);
  CHECK_THROWS_AS(attend(p, testing::random_matrix(rng, 1, 3), ann), DimensionError);
}

TEST_CASE("decode step") {
  const Seq2SeqParams p = init_params(tiny());
  const Annotations a = encode(p, {4, 6, 8});
  const DecodeStep d = decode_step(p, kBos, a.initial_state, a.vectors);
  double total = 0.0;
  for (double v : d.probs.data()) total += v;
  CHECK(std::abs(total - 1.0) < 1e-9);

  std::vector<Vec> rows;
  for (std::size_t i = 0; i < 3; ++i) rows.push_back(testing::row_of(a.vectors, i));
  const RefStep ref = reference_step(p, kBos, testing::row_of(a.initial_state, 0), rows);
  for (std::size_t k = 0; k < 7; ++k) CHECK(d.probs[k] == doctest::Approx(ref.probs[k]).epsilon(1e-12));
  for (std::size_t k = 0; k < 4; ++k) CHECK(d.state[k] == doctest::Approx(ref.state[k]).epsilon(1e-12));

  Seq2SeqParams zero = p;
  for (auto& t : zero.tensors) t = Tensor(t.shape());
  const DecodeStep u = decode_step(zero, 5, Tensor::matrix(1, 4), a.vectors);
  for (double v : u.probs.data()) CHECK(v == doctest::Approx(1.0 / 7).epsilon(1e-15));
  CHECK_THROWS_AS(decode_step(p, 7, a.initial_state, a.vectors), DataError);
}

TEST_CASE("teacher-forced trace counts, distributions and attention") {
  const Seq2SeqParams p = init_params(tiny());
  ParallelCorpus c;
  c.source_vocab = 9;
  c.target_vocab = 7;
  c.pairs = {{{4, 5}, {6, 4}}, {{8, 7, 6, 5}, {5}}, {{4}, {6, 6, 6, 5}}};
  Tape tape;
  const ForwardTrace one = run(tape, p, make_batch(c, {0}));
  CHECK(one.logits.value().rows() == 3);
  CHECK(one.targets == std::vector<std::size_t>{6, 4, kEos});

  Tape t2;
  const Batch b = make_batch(c, {0, 1, 2});
  const ForwardTrace all = run(t2, p, b);
  CHECK(all.logits.value().rows() == 3 + 2 + 5);
  const Tensor probs = all.distributions();
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    double total = 0.0;
    for (double v : probs.row(r)) {
      CHECK(v >= 0.0);
      total += v;
    }
    CHECK(std::abs(total - 1.0) < 1e-9);
  }
  for (const Tensor& att : all.attention)
    for (std::size_t r = 0; r < att.rows(); ++r) {
      double total = 0.0;
      for (std::size_t i = 0; i < att.cols(); ++i) {
        total += att(r, i);
        if (i >= b.source_lengths[r]) CHECK(att(r, i) == 0.0);
      }
      CHECK(std::abs(total - 1.0) < 1e-9);
    }
}

TEST_CASE("batch independence and permutation") {
  const Seq2SeqParams p = init_params(tiny());
  ParallelCorpus c;
  c.source_vocab = 9;
  c.target_vocab = 7;
  c.pairs = {{{4, 5, 6}, {6, 4}}, {{8}, {5, 5, 5}}, {{7, 7}, {4}}};
  Tape t;
  const ForwardTrace batched = run(t, p, make_batch(c, {0, 1, 2}));
  Tape tp;
  const ForwardTrace permuted = run(tp, p, make_batch(c, {2, 0, 1}));

  std::size_t row = 0;
  double loss_sum = 0.0;
  for (std::size_t e = 0; e < 3; ++e) {
    Tape ts;
    const ForwardTrace single = run(ts, p, make_batch(c, {e}));
    for (std::size_t j = 0; j < single.logits.value().rows(); ++j, ++row)
      for (std::size_t k = 0; k < 7; ++k) CHECK(single.logits.value()(j, k) == batched.logits.value()(row, k));
    loss_sum += cross_entropy(single.logits.value(), single.targets, 0.0).value;
  }
  // Rows per example: 3, 4, 2. The permuted batch [2, 0, 1] lists example 2
  // first, then 0, then 1.
  const std::size_t order[] = {7, 8, 0, 1, 2, 3, 4, 5, 6};
  for (std::size_t r = 0; r < 9; ++r)
    for (std::size_t k = 0; k < 7; ++k) CHECK(permuted.logits.value()(r, k) == batched.logits.value()(order[r], k));
  const double batched_loss = cross_entropy(batched.logits.value(), batched.targets, 0.0, batched.weights).value;
  CHECK(batched_loss == doctest::Approx(loss_sum / 3).epsilon(1e-13));
}

TEST_CASE("end-to-end gradient on sampled parameters") {
  Seq2SeqParams p = init_params(tiny(8));
  ParallelCorpus c;
  c.source_vocab = 9;
  c.target_vocab = 7;
  c.pairs = {{{4, 5, 6}, {6, 4}}, {{8, 4}, {5, 5, 6}}};
  const Batch b = make_batch(c, {0, 1});
  auto loss = [&](const Seq2SeqParams& q) {
    Tape t;
    const ForwardTrace tr = run(t, q, b);
    return cross_entropy(tr.logits.value(), tr.targets, 0.0, tr.weights).value;
  };
  Tape tape;
  ParamVars pv = bind_params(tape, p, true);
  const ForwardTrace tr = forward_teacher_forced(tape, pv, p.config, b);
  const LossOutput out = cross_entropy(tr.logits.value(), tr.targets, 0.0, tr.weights);
  tape.backward(sum(mul(tr.logits, tape.constant(out.grad_logits))));

  Rng rng(4);
  const double eps = 1e-5;
  for (int k = 0; k < 20; ++k) {
    const std::size_t block = rng.below(kParamCount);
    const std::size_t idx = rng.below(p.tensors[block].size());
    const double analytic = tape.grad(pv.vars[block].id)[idx];
    Seq2SeqParams up = p, down = p;
    up.tensors[block][idx] += eps;
    down.tensors[block][idx] -= eps;
    const double numeric = (loss(up) - loss(down)) / (2 * eps);
    CAPTURE(param_name(static_cast<ParamId>(block)));
    CHECK(std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic)) < 1e-4);
  }
}

TEST_CASE("score_sequence sums per-step log probabilities") {
  const Seq2SeqParams p = init_params(tiny());
  const Sentence src{4, 6, 8}, out{5, 6, kEos};
  const Annotations a = encode(p, src);
  Tensor s = a.initial_state;
  Token prev = kBos;
  double want = 0.0;
  for (Token t : out) {
    const DecodeStep d = decode_step(p, prev, s, a.vectors);
    want += std::log(d.probs[t]);
    s = d.state;
    prev = t;
  }
  CHECK(score_sequence(p, src, out) == doctest::Approx(want).epsilon(1e-12));
}
