#include "dsdlab/gradsuite.hpp"

#include <algorithm>
#include <functional>

#include "dsdlab/controller.hpp"
#include "dsdlab/corpus.hpp"
#include "dsdlab/divergences.hpp"
#include "dsdlab/error.hpp"
#include "dsdlab/rng.hpp"
#include "dsdlab/seq2seq.hpp"
#include "dsdlab/tape.hpp"

namespace dsdlab {

namespace {

// Loss family under test: value and logit gradient for one batch.
using LossFn = std::function<LossOutput(const Tensor& logits, const std::vector<std::size_t>& targets,
                                        const std::vector<double>& weights)>;

struct NamedLoss {
  std::string name;
  LossFn fn;
};

std::vector<NamedLoss> loss_families(std::vector<double>* cdsd_betas) {
  const SkewConfig skew;
  std::vector<NamedLoss> out;
  out.push_back({"xent", [](const Tensor& z, const auto& y, const auto& w) { return cross_entropy(z, y, 0.0, w); }});
  out.push_back(
      {"xent+smooth(0.1)", [](const Tensor& z, const auto& y, const auto& w) { return cross_entropy(z, y, 0.1, w); }});
  for (double beta : {0.0, 0.5, 1.0}) {
    char name[32];
    std::snprintf(name, sizeof name, "dsd(beta=%g)", beta);
    out.push_back({name, [skew, beta](const Tensor& z, const auto& y, const auto& w) {
                     return dsd_loss(z, y, skew, beta, w);
                   }});
  }
  // beta is read from the shared cursor; the caller refreshes it per batch.
  out.push_back({"cdsd", [skew, cdsd_betas](const Tensor& z, const auto& y, const auto& w) {
                   return cdsd_loss(z, y, skew, cdsd_betas->front(), w);
                 }});
  return out;
}

Tensor random_logits(Rng& rng, std::size_t rows, std::size_t cols) {
  Tensor z = Tensor::matrix(rows, cols);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = 2.0 * rng.normal();
  return z;
}

std::vector<double> random_weights(Rng& rng, std::size_t n) {
  std::vector<double> w(n);
  double total = 0.0;
  for (double& x : w) total += (x = rng.uniform(0.5, 1.5));
  for (double& x : w) x /= total;
  return w;
}

void scale(Tensor& t, double factor) {
  for (std::size_t i = 0; i < t.size(); ++i) t[i] *= factor;
}

// Tiny padded batch for the end-to-end check.
Batch model_batch(Rng& rng, std::size_t vocab) {
  ParallelCorpus c;
  c.source_vocab = vocab;
  c.target_vocab = vocab;
  const std::size_t lengths[][2] = {{3, 2}, {2, 3}};
  for (const auto& len : lengths) {
    SentencePair p;
    for (std::size_t i = 0; i < len[0]; ++i) p.source.push_back(kFirstContent + rng.below(vocab - kFirstContent));
    for (std::size_t i = 0; i < len[1]; ++i) p.target.push_back(kFirstContent + rng.below(vocab - kFirstContent));
    c.pairs.push_back(std::move(p));
  }
  return make_batch(c, {0, 1});
}

double model_check(const NamedLoss& loss, const GradcheckOptions& opt, Rng& rng) {
  Seq2SeqConfig cfg;
  cfg.source_vocab = opt.vocab;
  cfg.target_vocab = opt.vocab;
  cfg.embed_dim = 3;
  cfg.hidden_dim = 4;
  cfg.attention_dim = 3;
  cfg.max_source_length = 4;
  cfg.max_target_length = 4;
  cfg.seed = rng.next();
  cfg.init_scale = 0.5;
  Seq2SeqParams params = init_params(cfg);
  const Batch batch = model_batch(rng, opt.vocab);

  auto forward = [&](const Seq2SeqParams& p, Tape& tape, ParamVars& pv) {
    pv = bind_params(tape, p, true);
    return forward_teacher_forced(tape, pv, cfg, batch);
  };
  Tape tape;
  ParamVars pv;
  ForwardTrace trace = forward(params, tape, pv);
  LossOutput out = loss.fn(trace.logits.value(), trace.targets, trace.weights);
  tape.backward(sum(mul(trace.logits, tape.constant(out.grad_logits))));

  double worst = 0.0;
  for (std::size_t b = 0; b < kParamCount; ++b) {
    Tensor analytic = tape.grad(pv.vars[b].id);
    if (opt.corrupt != 0.0) scale(analytic, 1.0 + opt.corrupt);
    auto value = [&](const Tensor& block) {
      Seq2SeqParams probe = params;
      probe.tensors[b] = block;
      Tape t;
      ParamVars v;
      ForwardTrace tr = forward(probe, t, v);
      return loss.fn(tr.logits.value(), tr.targets, tr.weights).value;
    };
    worst = std::max(worst, grad_check(value, params.tensors[b], analytic, opt.eps));
  }
  return worst;
}

}  // namespace

bool GradcheckReport::pass() const {
  return !lines.empty() && std::all_of(lines.begin(), lines.end(), [](const auto& l) { return l.pass; });
}

GradcheckReport run_gradcheck(const GradcheckOptions& opt) {
  if (opt.batches == 0) throw ConfigError("gradcheck needs at least one batch");
  if (opt.vocab < kFirstContent + 1) throw ConfigError("gradcheck vocabulary must hold a content token");
  if (opt.positions == 0) throw ConfigError("gradcheck needs at least one position");
  std::vector<double> cdsd_beta{1.0};
  const auto families = loss_families(&cdsd_beta);

  // Betas drawn from a controller driven by random divergences, so cDSD is
  // checked at the values it sees in training.
  ControllerConfig cc;
  cc.set_point = 1.0;
  PiController controller(cc);
  Rng beta_rng(derive_seed(opt.seed, 0xbe7a));

  GradcheckReport report;
  for (std::size_t f = 0; f < families.size(); ++f) {
    const NamedLoss& loss = families[f];
    Rng rng(derive_seed(opt.seed, f));
    GradcheckLine line{loss.name, opt.batches, 0.0, false};
    for (std::size_t i = 0; i < opt.batches; ++i) {
      cdsd_beta.front() = controller.step(beta_rng.uniform(0.0, 3.0));
      const Tensor z = random_logits(rng, opt.positions, opt.vocab);
      std::vector<std::size_t> y(opt.positions);
      for (auto& t : y) t = rng.below(opt.vocab);
      const std::vector<double> w = random_weights(rng, opt.positions);
      Tensor analytic = loss.fn(z, y, w).grad_logits;
      if (opt.corrupt != 0.0) scale(analytic, 1.0 + opt.corrupt);
      auto value = [&](const Tensor& point) { return loss.fn(point, y, w).value; };
      line.max_error = std::max(line.max_error, grad_check(value, z, analytic, opt.eps));
    }
    line.pass = line.max_error < opt.threshold;
    report.lines.push_back(line);
  }
  if (opt.model) {
    for (std::size_t f = 0; f < families.size(); ++f) {
      const NamedLoss& loss = families[f];
      Rng rng(derive_seed(opt.seed, 0x100 + f));
      cdsd_beta.front() = 0.9;
      GradcheckLine line{"model:" + loss.name, 1, model_check(loss, opt, rng), false};
      line.pass = line.max_error < opt.threshold;
      report.lines.push_back(line);
    }
  }
  return report;
}

}  // namespace dsdlab
