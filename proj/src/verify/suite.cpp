#include "damix/verify/suite.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <sstream>

#include "damix/clustering.hpp"
#include "damix/errors.hpp"
#include "damix/evaluation.hpp"
#include "damix/graph_fusion.hpp"
#include "damix/normalization.hpp"
#include "damix/numerics/gradcheck.hpp"
#include "damix/numerics/random.hpp"
#include "damix/numerics/tensor_io.hpp"
#include "damix/objectives.hpp"
#include "damix/verify/oracles.hpp"

namespace damix::verify {

namespace fs = std::filesystem;
using pipeline::ReidModel;

bool CriterionReport::passed() const {
  if (checks.empty()) return false;
  for (const Check& c : checks)
    if (!c.passed) return false;
  return true;
}

void CriterionReport::add(std::string name, bool ok, std::string detail) {
  checks.push_back({std::move(name), ok, std::move(detail)});
}

namespace {

using Clock = std::chrono::steady_clock;

double elapsed(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string num(double v) {
  std::ostringstream s;
  s.precision(3);
  s << v;
  return s.str();
}

Tensor randn(Shape shape, Rng& rng, double scale = 1.0, double offset = 0.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = offset + scale * rng.normal();
  return t;
}

/// Guards a check body: a thrown damix error fails the check with its message.
void guarded(CriterionReport& rep, const std::string& name, const std::function<void()>& body) {
  try {
    body();
  } catch (const std::exception& e) {
    rep.add(name, false, std::string("threw: ") + e.what());
  }
}

void add_gradcheck(CriterionReport& rep, const std::string& name, const GradCheckReport& g) {
  rep.add(name, g.passed, "max rel error " + num(g.max_rel_error));
}

Var weighted_sum(Binder& bind, const Var& y, const Tensor& weights) {
  return sum_all(y * bind.tape().constant(weights));
}

std::vector<int> grouped_ids(std::size_t domains, std::size_t per_domain) {
  std::vector<int> ids;
  for (std::size_t d = 0; d < domains; ++d) ids.insert(ids.end(), per_domain, static_cast<int>(d));
  return ids;
}

void populate_agents(graph::AgentRegistry& reg, Rng& rng, std::size_t reference_q) {
  for (int d : reg.domains()) {
    reg.entry(d).agent = randn({reg.channels()}, rng);
    reg.entry(d).step = 1;
  }
  reg.reference_q = reference_q;
}

/// Tiny fully populated model: three domains, RDSBN with random rectifiers,
/// active fusion head, both classifiers.
ReidModel tiny_model(Rng& rng, std::size_t classes) {
  pipeline::ModelConfig mc;
  mc.in_channels = 3;
  mc.hidden = 4;
  mc.blocks = 2;
  mc.norm = norm::NormKind::dsbn;
  ReidModel m(mc, 7);
  for (int d = 0; d < 3; ++d) m.add_domain(d);
  m.set_norm_kind(norm::NormKind::rdsbn);
  for (auto& blk : m.blocks()) {
    for (int d : blk.norm.state().domains()) {
      auto& br = blk.norm.state().branch(d);
      br.bn.gamma = randn({mc.hidden}, rng, 0.2, 1.0);
      br.bn.beta = randn({mc.hidden}, rng, 0.2);
      br.rectifier = randn(br.rectifier.shape(), rng, 0.5);
      br.stats.mean = randn({mc.hidden}, rng, 0.1);
    }
  }
  m.set_fusion_active(true);
  m.mdif().w1 = Tensor::identity(mc.hidden);
  const Tensor noise = randn({mc.hidden, mc.hidden}, rng, 0.3);
  for (std::size_t i = 0; i < noise.size(); ++i) m.mdif().w1[i] += noise[i];
  m.mdif().w2 = randn({mc.hidden, mc.hidden}, rng, 0.3);
  m.agents().head_weight = randn({mc.hidden, 1}, rng, 0.1);
  m.agents().head_bias = Tensor({1, 1}, 1.0);
  populate_agents(m.agents(), rng, 4);
  m.id_head() = ReidModel::make_classifier(randn({classes, mc.hidden}, rng, 0.5));
  m.fused_head() = ReidModel::make_classifier(randn({classes, mc.hidden}, rng, 0.5));
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------

CriterionReport gradient_integrity() {
  const auto t0 = Clock::now();
  CriterionReport rep{1, "gradient integrity", {}, 0.0};
  Rng rng(101);

  guarded(rep, "bn_forward wrt x, gamma, beta", [&] {
    Tensor x = randn({4, 3, 5}, rng, 1.5, 0.3);
    norm::BnParams p = norm::BnParams::init(3);
    p.gamma = randn({3}, rng, 0.3, 1.0);
    p.beta = randn({3}, rng, 0.3);
    const Tensor w = randn({4, 3, 5}, rng);
    auto g = check_parameter_gradients(
        [&](Binder& b) {
          norm::RunningStats st = norm::RunningStats::init(3);
          return weighted_sum(b, norm::bn_forward(b, b(x), p, st, Mode::train), w);
        },
        {&x, &p.gamma, &p.beta});
    add_gradcheck(rep, "bn_forward wrt x, gamma, beta", g);
  });

  guarded(rep, "rdsbn_forward wrt x, gamma, beta, r", [&] {
    Tensor x = randn({6, 3, 5}, rng, 1.2, 0.5);
    const std::vector<int> ids{0, 1, 0, 1, 1, 0};
    norm::RdsbnState st(3, 1);
    std::vector<Tensor*> params{&x};
    for (int d : {0, 1}) {
      auto& br = st.add_domain(d);
      br.bn.gamma = randn({3}, rng, 0.3, 1.0);
      br.bn.beta = randn({3}, rng, 0.3);
      br.rectifier = randn({1, 2}, rng, 0.7);
    }
    for (int d : {0, 1}) {
      params.push_back(&st.branch(d).bn.gamma);
      params.push_back(&st.branch(d).bn.beta);
      params.push_back(&st.branch(d).rectifier);
    }
    const Tensor w = randn({6, 3, 5}, rng);
    auto g = check_parameter_gradients(
        [&](Binder& b) { return weighted_sum(b, norm::rdsbn_forward(b, b(x), ids, st, Mode::train), w); }, params);
    add_gradcheck(rep, "rdsbn_forward wrt x, gamma, beta, r", g);
  });

  guarded(rep, "mdif_forward wrt H0, W1, W2, agent head", [&] {
    const std::size_t c = 4;
    Tensor h0 = randn({6, c}, rng);
    const std::vector<int> ids{2, 0, 1, 0, 2, 1};
    graph::MdifParams p{randn({c, c}, rng, 0.5), randn({c, c}, rng, 0.5), 0.01};
    graph::AgentRegistry reg(c);
    for (int d : {0, 1, 2}) reg.add_domain(d);
    reg.head_weight = randn({c, 1}, rng, 0.1);
    reg.head_bias = Tensor({1, 1}, 1.0);
    const Tensor w = randn({6, c}, rng);
    auto g = check_parameter_gradients(
        [&](Binder& b) { return weighted_sum(b, graph::mdif_forward(b, b(h0), ids, p, reg, Mode::train), w); },
        {&h0, &p.w1, &p.w2, &reg.head_weight, &reg.head_bias});
    add_gradcheck(rep, "mdif_forward wrt H0, W1, W2, agent head", g);
  });

  guarded(rep, "id_loss wrt logits", [&] {
    Tensor logits = randn({6, 5}, rng, 2.0);
    const std::vector<int> labels{0, 3, 1, -1, 4, 2};
    const bool mask[6] = {false, false, false, true, false, false};
    auto g = check_parameter_gradients([&](Binder& b) { return obj::id_loss(b(logits), labels, mask); }, {&logits});
    add_gradcheck(rep, "id_loss wrt logits", g);
  });

  guarded(rep, "triplet_loss wrt features", [&] {
    Tensor f = randn({8, 4}, rng);
    const std::vector<int> labels{0, 0, 1, 1, 2, 2, 3, 3};
    auto g = check_parameter_gradients([&](Binder& b) { return obj::triplet_loss(b(f), labels, 1.0); }, {&f});
    add_gradcheck(rep, "triplet_loss wrt features", g);
  });

  guarded(rep, "adaptation loss on a tiny model", [&] {
    ReidModel m = tiny_model(rng, 6);
    obj::LabelSpace space;
    for (int d = 0; d < 3; ++d) space.set_domain(d, 2);
    pipeline::DomainBatch batch;
    batch.inputs = randn({12, 3, 5}, rng);
    batch.domain_ids = grouped_ids(3, 4);
    for (std::size_t i = 0; i < 12; ++i) batch.labels.push_back(static_cast<int>((i % 4) / 2));
    std::vector<Tensor*> params;
    for (const auto& p : m.trainable_parameters()) params.push_back(p.value);
    auto g = check_parameter_gradients(
        [&](Binder& b) { return pipeline::batch_loss(m, b, batch, space, obj::Stage::adapt, 0.3).total_var; }, params);
    add_gradcheck(rep, "adaptation loss on a tiny model (" + std::to_string(params.size()) + " tensors)", g);
  });

  rep.seconds = elapsed(t0);
  rep.add("suite runtime under 60 s", rep.seconds < 60.0, num(rep.seconds) + " s");
  return rep;
}

// ---------------------------------------------------------------------------

CriterionReport normalization_invariants() {
  const auto t0 = Clock::now();
  CriterionReport rep{2, "normalization invariants", {}, 0.0};
  Rng rng(202);
  const double eps = 1e-5;

  guarded(rep, "standardization moments", [&] {
    double worst_mean = 0.0, worst_var = 0.0;
    for (int trial = 0; trial < 40; ++trial) {
      const std::size_t n = 2 + rng.index(7), c = 1 + rng.index(6), l = 1 + rng.index(7);
      Tensor x({n, c, l});
      for (std::size_t k = 0; k < c; ++k) {
        const double mu = 5.0 * rng.normal(), s = std::exp(rng.normal());
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < l; ++j) x.at(i, k, j) = mu + s * rng.normal();
      }
      Tape tape;
      norm::RunningStats st = norm::RunningStats::init(c);
      const Tensor y = norm::standardize(tape.constant(x), st, eps, 0.1, Mode::train).value();
      const double m = double(n * l);
      for (std::size_t k = 0; k < c; ++k) {
        double xm = 0.0, ym = 0.0;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < l; ++j) xm += x.at(i, k, j), ym += y.at(i, k, j);
        xm /= m;
        ym /= m;
        double xv = 0.0, yv = 0.0;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < l; ++j) {
            xv += (x.at(i, k, j) - xm) * (x.at(i, k, j) - xm);
            yv += (y.at(i, k, j) - ym) * (y.at(i, k, j) - ym);
          }
        xv /= m;
        yv /= m;
        worst_mean = std::max(worst_mean, std::abs(ym));
        worst_var = std::max(worst_var, std::abs(yv - xv / (xv + eps)));
      }
    }
    rep.add("standardized |mean| <= 1e-10", worst_mean <= 1e-10, "worst " + num(worst_mean));
    rep.add("standardized variance within 1e-6 of s2/(s2+eps)", worst_var <= 1e-6, "worst " + num(worst_var));
  });

  guarded(rep, "per-domain standardization", [&] {
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t c = 1 + rng.index(4), l = 1 + rng.index(5);
      std::vector<int> ids;
      for (int d = 0; d < 3; ++d) ids.insert(ids.end(), 2 + rng.index(4), d);
      for (std::size_t i = ids.size(); i > 1; --i) std::swap(ids[i - 1], ids[rng.index(i)]);
      Tensor x({ids.size(), c, l});
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t k = 0; k < c; ++k)
          for (std::size_t j = 0; j < l; ++j) x.at(i, k, j) = 3.0 * ids[i] + (1.0 + ids[i]) * rng.normal();
      norm::RdsbnState st(c);
      for (int d = 0; d < 3; ++d) st.add_domain(d);
      Tape tape;
      Binder bind(tape, false);
      const Tensor y = norm::rdsbn_forward(bind, tape.constant(x), ids, st, Mode::train, false).value();
      for (int d = 0; d < 3; ++d) {
        for (std::size_t k = 0; k < c; ++k) {
          double s = 0.0, m = 0.0;
          for (std::size_t i = 0; i < ids.size(); ++i)
            if (ids[i] == d)
              for (std::size_t j = 0; j < l; ++j) s += y.at(i, k, j), m += 1.0;
          worst = std::max(worst, std::abs(s / m));
        }
      }
    }
    rep.add("per-domain standardized |mean| <= 1e-10", worst <= 1e-10, "worst " + num(worst));
  });

  guarded(rep, "rdsbn r=0 equals 0.5 x dsbn", [&] {
    bool all = true;
    for (int trial = 0; trial < 20; ++trial) {
      const std::size_t c = 1 + rng.index(5), l = 2 + rng.index(5);
      const std::vector<int> ids{0, 1, 1, 0, 2, 2, 0};
      norm::RdsbnState st(c, 1 + rng.index(3));
      for (int d = 0; d < 3; ++d) {
        auto& br = st.add_domain(d);
        br.bn.gamma = randn({c}, rng, 0.5, 1.0);
        br.bn.beta = randn({c}, rng, 0.5);
        br.stats.mean = randn({c}, rng);
        br.stats.var = randn({c}, rng, 0.2, 1.0);
      }
      const Tensor x = randn({ids.size(), c, l}, rng, 2.0);
      for (Mode mode : {Mode::train, Mode::eval}) {
        norm::RdsbnState a = st, b = st;
        Tape tape;
        Binder bind(tape, false);
        const Tensor yr = norm::rdsbn_forward(bind, tape.constant(x), ids, a, mode, true).value();
        const Tensor yd = norm::rdsbn_forward(bind, tape.constant(x), ids, b, mode, false).value();
        for (std::size_t i = 0; i < yr.size(); ++i) all = all && yr[i] == 0.5 * yd[i];
      }
    }
    rep.add("rdsbn with r=0 equals 0.5 x dsbn elementwise (exact)", all);
  });

  rep.seconds = elapsed(t0);
  return rep;
}

// ---------------------------------------------------------------------------

CriterionReport graph_invariants() {
  const auto t0 = Clock::now();
  CriterionReport rep{3, "graph invariants", {}, 0.0};
  Rng rng(303);

  guarded(rep, "adjacency structure", [&] {
    std::string first_bad;
    std::size_t tried = 0;
    for (std::size_t d = 1; d <= 4; ++d)
      for (std::size_t q = 0; q <= 8; ++q)
        for (int layer : {1, 2}) {
          ++tried;
          const graph::GraphSpec g = graph::build_adjacency(d, q, layer);
          const Tensor want = oracle::adjacency(d, q, layer);
          bool ok = g.adjacency == want && max_abs_diff(g.normalized, oracle::normalize(want)) <= 1e-15;
          for (std::size_t i = 0; i < g.num_nodes(); ++i) {
            ok = ok && g.adjacency.at(i, i) == 1.0;
            for (std::size_t j = 0; j < g.num_nodes(); ++j)
              ok = ok && g.normalized.at(i, j) == g.normalized.at(j, i);
          }
          if (!ok && first_bad.empty())
            first_bad = "D=" + std::to_string(d) + " Q=" + std::to_string(q) + " layer " + std::to_string(layer);
        }
    rep.add("adjacency and normalization for D in 1..4, Q in 0..8, both layers", first_bad.empty(),
            first_bad.empty() ? std::to_string(tried) + " graphs" : "mismatch at " + first_bad);
    const graph::GraphSpec g = graph::build_adjacency(2, 1, 2);
    rep.add("D=2 Q=1 layer 2: instance to own agent is 1/sqrt(6)",
            std::abs(g.normalized.at(0, g.agent_node(0)) - 1.0 / std::sqrt(6.0)) <= 1e-15);
  });

  guarded(rep, "3-agent clique", [&] {
    bool exact = true;
    for (std::size_t q : {0u, 2u, 5u}) {
      const graph::GraphSpec g = graph::build_adjacency(3, q, 1);
      for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t b = 0; b < 3; ++b) exact = exact && g.normalized.at(g.agent_node(a), g.agent_node(b)) == 1.0 / 3.0;
    }
    rep.add("3-agent clique normalization is exactly 1/3", exact);
  });

  guarded(rep, "gcn_layer oracle", [&] {
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      graph::GraphSpec g;
      g.num_domains = 1;
      g.per_domain = 4;
      g.adjacency = Tensor({5, 5}, 0.0);
      for (std::size_t i = 0; i < 5; ++i) {
        g.adjacency.at(i, i) = 1.0;
        for (std::size_t j = i + 1; j < 5; ++j) g.adjacency.at(i, j) = g.adjacency.at(j, i) = rng.uniform() < 0.5 ? 1.0 : 0.0;
      }
      g.normalized = graph::normalize_adjacency(g.adjacency);
      const Tensor h = randn({5, 3}, rng), w = randn({3, 4}, rng);
      Tape tape;
      const Tensor got = graph::gcn_layer(tape.constant(h), g, tape.constant(w), 0.2).value();
      worst = std::max(worst, max_abs_diff(got, oracle::gcn_layer(g.normalized, h, w, 0.2)));
    }
    rep.add("gcn_layer matches the scalar-loop oracle within 1e-12", worst <= 1e-12, "worst " + num(worst));
  });

  guarded(rep, "mdif train oracle", [&] {
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
      const std::size_t c = 4, d = 3, q = 2;
      const Tensor h0 = randn({d * q, c}, rng);
      graph::MdifParams p{randn({c, c}, rng, 0.6), randn({c, c}, rng, 0.6), 0.01};
      graph::AgentRegistry reg(c);
      for (int k = 0; k < int(d); ++k) reg.add_domain(k);
      reg.head_weight = randn({c, 1}, rng, 0.1);
      reg.head_bias = Tensor({1, 1}, 1.0);
      Tape tape;
      Binder bind(tape, false);
      const Tensor got =
          graph::mdif_forward(bind, tape.constant(h0), grouped_ids(d, q), p, reg, Mode::train).value();
      const Tensor want = oracle::mdif_train(h0, d, p.w1, p.w2, reg.head_weight, 1.0, 0.01);
      worst = std::max(worst, max_abs_diff(got, want));
    }
    rep.add("train-mode fusion matches the explicit-matrix oracle within 1e-10", worst <= 1e-10, "worst " + num(worst));
  });

  guarded(rep, "eval independence", [&] {
    const std::size_t c = 5;
    graph::AgentRegistry reg(c);
    for (int k = 0; k < 3; ++k) reg.add_domain(k);
    populate_agents(reg, rng, 4);
    graph::MdifParams p{randn({c, c}, rng, 0.6), randn({c, c}, rng, 0.6), 0.01};
    const std::vector<int> ids{0, 1, 2, 0, 1, 2, 2};
    const Tensor h0 = randn({ids.size(), c}, rng);
    auto run = [&](const Tensor& h, std::span<const int> tags) {
      Tape tape;
      Binder bind(tape, false);
      return graph::mdif_forward(bind, tape.constant(h), tags, p, reg, Mode::eval).value();
    };
    const Tensor base = run(h0, ids);
    bool independent = true;
    for (std::size_t j = 0; j < ids.size(); ++j) {
      Tensor h = h0;
      for (std::size_t k = 0; k < c; ++k) h.at(j, k) += rng.normal();
      const Tensor out = run(h, ids);
      for (std::size_t i = 0; i < ids.size(); ++i)
        if (i != j) independent = independent && bitwise_equal(out.row(i), base.row(i));
    }
    rep.add("eval mode: perturbing one instance leaves the others bitwise unchanged", independent);
    double worst = 0.0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const int tag[1] = {ids[i]};
      worst = std::max(worst, max_abs_diff(run(h0.row(i), tag), base.row(i)));
    }
    rep.add("eval mode: one-at-a-time equals batched within 1e-12", worst <= 1e-12, "worst " + num(worst));
  });

  guarded(rep, "zero parameters", [&] {
    const std::size_t c = 4;
    graph::AgentRegistry reg(c);
    for (int k = 0; k < 3; ++k) reg.add_domain(k);
    const graph::MdifParams zero = graph::MdifParams::zeros(c);
    const Tensor h0 = randn({6, c}, rng);
    bool same = true;
    for (Mode mode : {Mode::train, Mode::eval}) {
      Tape tape;
      Binder bind(tape, false);
      same = same && bitwise_equal(graph::mdif_forward(bind, tape.constant(h0), grouped_ids(3, 2), zero, reg, mode).value(), h0);
    }
    rep.add("zero fusion weights return H0 bitwise (train and eval)", same);

    ReidModel m = tiny_model(rng, 6);
    m.mdif() = graph::MdifParams::zeros(m.config().hidden);
    const Tensor q = randn({6, 3, 5}, rng), gal = randn({12, 3, 5}, rng);
    const std::vector<int> qid{0, 1, 2, 3, 4, 5}, gid{0, 1, 2, 3, 4, 5, 0, 1, 2, 3, 4, 5};
    const Tensor qf = m.extract(q, 2, true), gf = m.extract(gal, 2, true);
    const Tensor qb = m.extract(q, 2, false), gb = m.extract(gal, 2, false);
    const eval::RetrievalOptions opt{true};
    const auto rf = eval::evaluate_retrieval(qf, qid, gf, gid, opt);
    const auto rb = eval::evaluate_retrieval(qb, qid, gb, gid, opt);
    const bool pipeline_same = bitwise_equal(qf, qb) && bitwise_equal(gf, gb) && rf.mean_ap == rb.mean_ap &&
                               rf.cmc == rb.cmc && rf.average_precision == rb.average_precision;
    rep.add("zero fusion weights reproduce the no-fusion features and retrieval bitwise", pipeline_same);
  });

  rep.seconds = elapsed(t0);
  return rep;
}

// ---------------------------------------------------------------------------

CriterionReport oracle_equivalence() {
  const auto t0 = Clock::now();
  CriterionReport rep{4, "oracle equivalence", {}, 0.0};
  Rng rng(404);

  guarded(rep, "dbscan", [&] {
    int matched = 0, total = 0;
    std::string first_bad;
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t n = 1 + rng.index(200), dims = 2 + rng.index(3), centers = 1 + rng.index(6);
      std::vector<Tensor> mu;
      for (std::size_t k = 0; k < centers; ++k) mu.push_back(randn({dims}, rng, 4.0));
      Tensor pts({n, dims});
      for (std::size_t i = 0; i < n; ++i) {
        const bool stray = rng.uniform() < 0.1;
        const Tensor& m = mu[rng.index(centers)];
        for (std::size_t k = 0; k < dims; ++k) pts.at(i, k) = stray ? 8.0 * (rng.uniform() - 0.5) * 2.0 : m[k] + 0.5 * rng.normal();
      }
      // Some instances on an integer lattice so distances hit eps exactly.
      if (trial % 4 == 0)
        for (double& v : pts.data()) v = std::round(v);
      const double eps = trial % 4 == 0 ? 1.0 : 0.2 + 1.3 * rng.uniform();
      const std::size_t min_pts = 1 + rng.index(6);
      const auto got = cluster::dbscan(pts, eps, min_pts);
      const auto want = oracle::dbscan(pts, eps, min_pts);
      ++total;
      if (got.num_clusters == want.num_clusters && oracle::same_partition(got.labels, want.labels)) {
        ++matched;
      } else if (first_bad.empty()) {
        first_bad = "trial " + std::to_string(trial);
      }
    }
    rep.add("dbscan matches the density-reachability oracle on 100 instances", matched == total,
            std::to_string(matched) + "/" + std::to_string(total) + (first_bad.empty() ? "" : ", first miss " + first_bad));
  });

  guarded(rep, "retrieval", [&] {
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t ids = 1 + rng.index(8), c = 1 + rng.index(8);
      const std::size_t nq = 1 + rng.index(20), ng = ids + rng.index(50);
      std::vector<int> gid(ng), qid(nq);
      for (std::size_t j = 0; j < ng; ++j) gid[j] = j < ids ? int(j) : int(rng.index(ids));
      for (std::size_t j = ng; j > 1; --j) std::swap(gid[j - 1], gid[rng.index(j)]);
      for (std::size_t i = 0; i < nq; ++i) qid[i] = int(rng.index(ids));
      Tensor q = randn({nq, c}, rng), g = randn({ng, c}, rng);
      if (trial % 3 == 0) {
        for (double& v : q.data()) v = std::round(v);
        for (double& v : g.data()) v = std::round(v);
      }
      const auto got = eval::evaluate_retrieval(q, qid, g, gid);
      const auto want = oracle::retrieval(q, qid, g, gid);
      worst = std::max(worst, std::abs(got.mean_ap - want.mean_ap));
      for (std::size_t i = 0; i < nq; ++i) worst = std::max(worst, std::abs(got.average_precision[i] - want.average_precision[i]));
      for (std::size_t k = 0; k < ng; ++k) worst = std::max(worst, std::abs(got.cmc[k] - want.cmc[k]));
    }
    rep.add("evaluate_retrieval matches the brute-force AP oracle within 1e-12 on 50 instances", worst <= 1e-12,
            "worst " + num(worst));
  });

  guarded(rep, "class spread", [&] {
    double worst_inter = 0.0, worst_intra = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t k = 2 + rng.index(5), c = 1 + rng.index(8), n = k + rng.index(60);
      std::vector<int> labels(n);
      for (std::size_t i = 0; i < n; ++i) labels[i] = i < k ? int(i) * 3 : int(rng.index(k)) * 3;
      const Tensor f = randn({n, c}, rng, 2.0);
      worst_inter = std::max(worst_inter, std::abs(eval::interclass_distance(f, labels) - oracle::interclass_distance(f, labels)));
      for (bool per : {false, true})
        worst_intra = std::max(worst_intra, std::abs(eval::intraclass_variance(f, labels, per) -
                                                     oracle::intraclass_variance(f, labels, per)));
    }
    rep.add("inter-class distance matches the loop oracle within 1e-12", worst_inter <= 1e-12, "worst " + num(worst_inter));
    rep.add("intra-class variance matches the loop oracle within 1e-12", worst_intra <= 1e-12, "worst " + num(worst_intra));
  });

  rep.seconds = elapsed(t0);
  return rep;
}

// ---------------------------------------------------------------------------

CriterionReport moving_averages() {
  const auto t0 = Clock::now();
  CriterionReport rep{7, "moving-average correctness", {}, 0.0};
  Rng rng(707);

  auto geometric_gap = [](const Tensor& now, const Tensor& start, const Tensor& target, double alpha, std::size_t t) {
    double worst = 0.0;
    for (std::size_t k = 0; k < now.size(); ++k) {
      const double lhs = std::abs(now[k] - target[k]);
      const double rhs = std::pow(1.0 - alpha, double(t)) * std::abs(start[k] - target[k]);
      worst = std::max(worst, std::abs(lhs - rhs));
    }
    return worst;
  };

  guarded(rep, "running stats", [&] {
    double worst = 0.0;
    for (double alpha : {0.05, 0.1, 0.5, 0.9, 1.0}) {
      norm::RunningStats st{randn({4}, rng, 3.0), randn({4}, rng, 0.5, 2.0), 0};
      const norm::RunningStats start = st;
      const Tensor mu = randn({4}, rng), var = randn({4}, rng, 0.2, 1.0);
      for (std::size_t t = 1; t <= 60; ++t) {
        st = norm::update_running_stats(st, mu, var, alpha);
        worst = std::max({worst, geometric_gap(st.mean, start.mean, mu, alpha, t),
                          geometric_gap(st.var, start.var, var, alpha, t)});
      }
    }
    rep.add("running mean/var follow (1-a)^t to 1e-12", worst <= 1e-12, "worst " + num(worst));
  });

  guarded(rep, "running stats through standardize", [&] {
    const std::size_t n = 5, c = 3, l = 4;
    const Tensor x = randn({n, c, l}, rng, 2.0, 1.0);
    Tensor mu({c}, 0.0), var({c}, 0.0);
    for (std::size_t k = 0; k < c; ++k) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < l; ++j) mu[k] += x.at(i, k, j);
      mu[k] /= double(n * l);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < l; ++j) var[k] += (x.at(i, k, j) - mu[k]) * (x.at(i, k, j) - mu[k]);
      var[k] /= double(n * l);
    }
    double worst = 0.0;
    const double alpha = 0.1;
    norm::RunningStats st = norm::RunningStats::init(c);
    const norm::RunningStats start = st;
    for (std::size_t t = 1; t <= 50; ++t) {
      Tape tape;
      norm::standardize(tape.constant(x), st, 1e-5, alpha, Mode::train);
      worst = std::max({worst, geometric_gap(st.mean, start.mean, mu, alpha, t), geometric_gap(st.var, start.var, var, alpha, t)});
    }
    rep.add("constant batches through train-mode standardize converge geometrically to 1e-12", worst <= 1e-12,
            "worst " + num(worst));
    rep.add("running stats step count", st.step == 50, std::to_string(st.step));
  });

  guarded(rep, "agents", [&] {
    double worst = 0.0;
    for (double alpha : {0.05, 0.1, 0.5, 0.9}) {
      graph::AgentRegistry reg(5, alpha);
      reg.add_domain(3);
      reg.entry(3).agent = randn({5}, rng, 2.0);
      const Tensor start = reg.entry(3).agent, v = randn({5}, rng);
      for (std::size_t t = 1; t <= 60; ++t) {
        graph::update_agent(reg, 3, v, alpha);
        worst = std::max(worst, geometric_gap(reg.entry(3).agent, start, v, alpha, t));
      }
    }
    rep.add("agent registry follows (1-a)^t to 1e-12", worst <= 1e-12, "worst " + num(worst));
  });

  guarded(rep, "agents through fusion", [&] {
    const std::size_t c = 4;
    const double alpha = 0.1;
    graph::AgentRegistry reg(c, alpha);
    for (int d = 0; d < 2; ++d) reg.add_domain(d);
    reg.head_weight = randn({c, 1}, rng, 0.1);
    reg.head_bias = Tensor({1, 1}, 1.0);
    for (int d = 0; d < 2; ++d) {
      reg.entry(d).agent = randn({c}, rng, 2.0);
      reg.entry(d).step = 1;
    }
    const std::vector<Tensor> start{reg.entry(0).agent, reg.entry(1).agent};
    const Tensor h0 = randn({6, c}, rng);
    const std::vector<int> ids = grouped_ids(2, 3);
    std::vector<Tensor> target;
    for (int d = 0; d < 2; ++d) {
      Tape tape;
      Binder bind(tape, false);
      target.push_back(graph::compute_agent(bind, tape.constant(h0.rows(d * 3, d * 3 + 3)), reg).value().reshaped({c}));
    }
    const graph::MdifParams p = graph::MdifParams::init(c);
    double worst = 0.0;
    for (std::size_t t = 1; t <= 40; ++t) {
      Tape tape;
      Binder bind(tape, false);
      graph::mdif_forward(bind, tape.constant(h0), ids, p, reg, Mode::train);
      for (int d = 0; d < 2; ++d) worst = std::max(worst, geometric_gap(reg.entry(d).agent, start[d], target[d], alpha, t));
    }
    rep.add("agents updated by train-mode fusion converge geometrically to 1e-12", worst <= 1e-12, "worst " + num(worst));
  });

  rep.seconds = elapsed(t0);
  return rep;
}

// ---------------------------------------------------------------------------

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Relative paths of every regular file under `root`, sorted.
std::vector<fs::path> files_under(const fs::path& root) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root));
  std::sort(out.begin(), out.end());
  return out;
}

ExperimentConfig smoke_config() {
  ExperimentConfig c = ExperimentConfig::benchmark();
  c.data.identities_per_domain = 6;
  c.data.samples_per_identity = 8;
  c.data.eval_identities = 8;
  c.pretrain.epochs = 3;
  c.pretrain.iters_per_epoch = 4;
  c.pretrain.milestones = {};
  c.adapt.stage.epochs = 2;
  c.adapt.stage.iters_per_epoch = 4;
  c.adapt.stage.milestones = {};
  c.seed = 11;
  return c;
}

}  // namespace

CriterionReport determinism(const fs::path& scratch) {
  const auto t0 = Clock::now();
  CriterionReport rep{8, "determinism and persistence", {}, 0.0};

  guarded(rep, "identical reruns", [&] {
    const ExperimentConfig cfg = smoke_config();
    const fs::path a = scratch / "rerun_a", b = scratch / "rerun_b";
    fs::remove_all(a);
    fs::remove_all(b);
    const RunResult ra = run_experiment(cfg, {StageSelect::all, a});
    const RunResult rb = run_experiment(cfg, {StageSelect::all, b});
    rep.add("fixed-seed runs complete", ra.manifest.ok() && rb.manifest.ok(), ra.manifest.diagnostic + rb.manifest.diagnostic);
    const fs::path da = ra.manifest.dir, db = rb.manifest.dir;
    const auto fa = files_under(da), fb = files_under(db);
    std::size_t compared = 0;
    std::string diff;
    if (fa != fb) diff = "file lists differ";
    for (const fs::path& f : fa) {
      if (f == "manifest.json" || !diff.empty()) continue;  // wall-clock seconds live there
      ++compared;
      if (slurp(da / f) != slurp(db / f)) diff = f.string();
    }
    rep.add("fixed-seed runs are byte-identical", diff.empty() && compared > 0,
            diff.empty() ? std::to_string(compared) + " files" : "differs: " + diff);
  });

  guarded(rep, "checkpoint round trip", [&] {
    const ExperimentConfig cfg = smoke_config();
    const pipeline::SyntheticData data = make_data(cfg);
    Pretrained pre = run_pretrain(cfg, data);
    ReidModel m = pre.model;
    m.set_variant(norm::NormKind::rdsbn, true);
    const auto sources = data.sources();
    pipeline::DomainDataset target = data.target();
    pipeline::convert_for_adaptation(m, sources, target, cfg.adapt.stage.plan);
    pipeline::AdaptConfig ac = cfg.adapt;
    ac.stage.epochs = 1;
    pipeline::TrainLog log;
    pipeline::adapt_stage(m, sources, target, ac, 5, {}, log);

    const fs::path dir = scratch / "checkpoint";
    fs::remove_all(dir);
    TensorArchive ar;
    m.save(ar);
    ar.save(dir);
    ReidModel back = ReidModel::load(TensorArchive::load(dir));

    bool same = true;
    for (const auto& ds : data.domains) {
      for (bool fused : {false, true}) same = same && bitwise_equal(m.extract(ds.inputs, ds.domain, fused), back.extract(ds.inputs, ds.domain, fused));
    }
    rep.add("eval features identical after save/load", same);

    const pipeline::DomainBatch batch = pipeline::sample_batch(sources, cfg.adapt.stage.plan, 99);
    ReidModel m2 = m, b2 = back;
    Tape t1, t2;
    Binder bind1(t1, false), bind2(t2, false);
    const auto o1 = m2.forward(bind1, batch.inputs, batch.domain_ids, Mode::train);
    const auto o2 = b2.forward(bind2, batch.inputs, batch.domain_ids, Mode::train);
    const bool train_same = bitwise_equal(o1.features.value(), o2.features.value()) &&
                            bitwise_equal(o1.logits.value(), o2.logits.value()) && o1.fused && o2.fused &&
                            bitwise_equal(o1.fused->value(), o2.fused->value()) &&
                            bitwise_equal(o1.fused_logits->value(), o2.fused_logits->value());
    rep.add("train-mode forward identical after save/load", train_same);

    const fs::path again = scratch / "checkpoint_again";
    fs::remove_all(again);
    TensorArchive ar2;
    back.save(ar2);
    ar2.save(again);
    const auto f1 = files_under(dir), f2 = files_under(again);
    bool bytes = f1 == f2;
    for (const fs::path& f : f1) bytes = bytes && slurp(dir / f) == slurp(again / f);
    rep.add("re-saved checkpoint is byte-identical", bytes);
  });

  rep.seconds = elapsed(t0);
  return rep;
}

// ---------------------------------------------------------------------------

AblationOutcome ablation(const ExperimentConfig& config, std::span<const std::uint64_t> seeds) {
  const auto t0 = Clock::now();
  AblationOutcome out;
  out.directional = {5, "directional ablation", {}, 0.0};
  out.domain_gap = {6, "domain-gap reduction", {}, 0.0};
  try {
    out.rows = run_ablation(config, seeds, {StageSelect::all, {}});
  } catch (const std::exception& e) {
    out.directional.add("ablation runs", false, e.what());
    out.domain_gap.add("ablation runs", false, e.what());
    return out;
  }
  out.seconds = elapsed(t0);

  auto find = [&](std::uint64_t seed, const std::string& variant) -> const AblationRow* {
    for (const auto& r : out.rows)
      if (r.seed == seed && r.variant == variant) return &r;
    return nullptr;
  };

  CriterionReport& dir = out.directional;
  bool all_ok = true;
  for (const auto& r : out.rows) all_ok = all_ok && r.ok;
  dir.add("all variant runs complete", all_ok);
  dir.add("adapt epochs <= 10", config.adapt.stage.epochs <= 10, std::to_string(config.adapt.stage.epochs));
  dir.add("total runtime under 5 min", out.seconds < 300.0, num(out.seconds) + " s");

  struct Cmp {
    const char* a;
    const char* b;
    bool strict;
  };
  const Cmp comparisons[] = {{"dsbn", "bn", true},           {"rdsbn", "dsbn", false},
                             {"bn+mdif", "bn", false},       {"dsbn+mdif", "dsbn", false},
                             {"rdsbn+mdif", "rdsbn", false}, {"rdsbn+mdif", "bn", true}};
  for (const Cmp& c : comparisons) {
    for (std::uint64_t seed : seeds) {
      const AblationRow* a = find(seed, c.a);
      const AblationRow* b = find(seed, c.b);
      const bool ok = a && b && a->ok && b->ok && (c.strict ? a->rank1 > b->rank1 : a->rank1 >= b->rank1);
      dir.add(std::string("seed ") + std::to_string(seed) + ": rank-1 " + c.a + (c.strict ? " > " : " >= ") + c.b, ok,
              a && b ? num(a->rank1) + " vs " + num(b->rank1) : "missing run");
    }
  }

  CriterionReport& gap = out.domain_gap;
  for (const char* base : {"bn", "dsbn", "rdsbn"}) {
    for (std::uint64_t seed : seeds) {
      const AblationRow* plain = find(seed, base);
      const AblationRow* fused = find(seed, std::string(base) + "+mdif");
      if (!plain || !fused || !plain->ok || !fused->ok || plain->domains != fused->domains) {
        gap.add(std::string("seed ") + std::to_string(seed) + ": " + base, false, "missing run");
        continue;
      }
      const auto& doms = plain->domains;
      for (std::size_t x = 0; x < doms.size(); ++x) {
        for (std::size_t y = x + 1; y < doms.size(); ++y) {
          const double with = fused->distance.at(x, y), without = plain->distance.at(x, y);
          gap.add("seed " + std::to_string(seed) + ": " + base + "+mdif < " + base + " on domains " + std::to_string(doms[x]) +
                      "-" + std::to_string(doms[y]),
                  with < without, num(with) + " vs " + num(without));
        }
      }
    }
  }
  dir.seconds = gap.seconds = out.seconds;
  return out;
}

std::vector<CriterionReport> invariant_suite(const fs::path& scratch) {
  std::vector<CriterionReport> out;
  out.push_back(gradient_integrity());
  out.push_back(normalization_invariants());
  out.push_back(graph_invariants());
  out.push_back(oracle_equivalence());
  out.push_back(moving_averages());
  out.push_back(determinism(scratch));
  return out;
}

std::string format(const CriterionReport& report) {
  std::size_t ok = 0;
  for (const Check& c : report.checks) ok += c.passed ? 1 : 0;
  std::string out = "criterion " + std::to_string(report.id) + ": " + (report.passed() ? "PASS " : "FAIL ") + report.title +
                    " (" + std::to_string(ok) + "/" + std::to_string(report.checks.size()) + " checks, " +
                    num(report.seconds) + " s)\n";
  for (const Check& c : report.checks) {
    if (c.passed) continue;
    out += "    failed: " + c.name + (c.detail.empty() ? "" : " [" + c.detail + "]") + "\n";
  }
  return out;
}

}  // namespace damix::verify
