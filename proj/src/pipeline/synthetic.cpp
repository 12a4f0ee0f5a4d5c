#include "damix/pipeline/synthetic.hpp"

#include <cmath>

#include "damix/errors.hpp"
#include "damix/numerics/random.hpp"

namespace damix::pipeline {

void SyntheticSpec::validate() const {
  if (num_domains < 2) throw ConfigError("synthetic data needs at least one source and one target domain");
  if (identities_per_domain == 0 || samples_per_identity == 0) throw ConfigError("synthetic domains must be non-empty");
  if (channels == 0 || length == 0) throw ConfigError("synthetic input extents must be positive");
  if (eval_identities == 0 || eval_samples_per_identity < 2) {
    throw ConfigError("evaluation split needs identities with at least two samples");
  }
  if (queries_per_identity == 0 || queries_per_identity >= eval_samples_per_identity) {
    throw ConfigError("queries_per_identity must leave at least one gallery sample");
  }
  for (double v : {style_scale, style_shift, style_mixing, instance_jitter, noise}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("synthetic scales must be finite and non-negative");
  }
}

std::vector<DomainDataset> SyntheticData::sources() const {
  return std::vector<DomainDataset>(domains.begin(), domains.end() - 1);
}

namespace {

struct Style {
  Tensor mixing;  // C x C
  std::vector<double> scale;
  std::vector<double> shift;
};

Style draw_style(const SyntheticSpec& spec, Rng& rng) {
  const std::size_t c = spec.channels;
  Style s{Tensor::identity(c), std::vector<double>(c), std::vector<double>(c)};
  const double mix_std = spec.style_mixing / std::sqrt(static_cast<double>(c));
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t j = 0; j < c; ++j) s.mixing.at(i, j) += mix_std * rng.normal();
  }
  for (std::size_t i = 0; i < c; ++i) s.scale[i] = std::exp(spec.style_scale * rng.normal());
  for (std::size_t i = 0; i < c; ++i) s.shift[i] = spec.style_shift * rng.normal();
  return s;
}

Tensor draw_prototype(const SyntheticSpec& spec, Rng& rng) {
  Tensor p({spec.channels});
  for (double& v : p.data()) v = rng.normal();
  return p;
}

// Writes one styled sample into rows [n] of out (N x C x L).
void render(const SyntheticSpec& spec, const Style& style, const Tensor& proto, Rng& rng, Tensor& out, std::size_t n) {
  const std::size_t c = spec.channels, l = spec.length;
  std::vector<double> z(c * l);
  std::vector<double> scale(c), shift(c);
  for (std::size_t i = 0; i < c; ++i) {
    scale[i] = style.scale[i] * std::exp(spec.instance_jitter * rng.normal());
    shift[i] = style.shift[i] + spec.instance_jitter * rng.normal();
  }
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t t = 0; t < l; ++t) z[i * l + t] = scale[i] * (proto[i] + spec.noise * rng.normal()) + shift[i];
  }
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t t = 0; t < l; ++t) {
      double acc = 0.0;
      for (std::size_t j = 0; j < c; ++j) acc += style.mixing.at(i, j) * z[j * l + t];
      out.at(n, i, t) = acc;
    }
  }
}

}  // namespace

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  SyntheticData data;
  const std::size_t ids = spec.identities_per_domain, per = spec.samples_per_identity;
  Style target_style;
  for (std::size_t d = 0; d < spec.num_domains; ++d) {
    Rng rng(mix_seed(spec.seed, d));
    const Style style = draw_style(spec, rng);
    DomainDataset ds;
    ds.domain = static_cast<int>(d);
    ds.role = d + 1 == spec.num_domains ? Role::target : Role::source;
    ds.inputs = Tensor({ids * per, spec.channels, spec.length});
    for (std::size_t i = 0; i < ids; ++i) {
      const Tensor proto = draw_prototype(spec, rng);
      for (std::size_t k = 0; k < per; ++k) {
        render(spec, style, proto, rng, ds.inputs, i * per + k);
        ds.labels.push_back(ds.role == Role::source ? static_cast<int>(i) : -1);
        ds.identities.push_back(static_cast<int>(d * ids + i));
      }
    }
    data.domains.push_back(std::move(ds));
    if (d + 1 == spec.num_domains) target_style = style;
  }

  // Held-out identities share the target style but draw from their own stream.
  Rng rng(mix_seed(spec.seed, spec.num_domains));
  RetrievalSplit& ev = data.eval;
  ev.domain = static_cast<int>(spec.num_domains - 1);
  const std::size_t q = spec.queries_per_identity, g = spec.eval_samples_per_identity - q;
  ev.query = Tensor({spec.eval_identities * q, spec.channels, spec.length});
  ev.gallery = Tensor({spec.eval_identities * g, spec.channels, spec.length});
  const int base = static_cast<int>(spec.num_domains * ids);
  for (std::size_t i = 0; i < spec.eval_identities; ++i) {
    const Tensor proto = draw_prototype(spec, rng);
    for (std::size_t k = 0; k < q; ++k) {
      render(spec, target_style, proto, rng, ev.query, ev.query_ids.size());
      ev.query_ids.push_back(base + static_cast<int>(i));
    }
    for (std::size_t k = 0; k < g; ++k) {
      render(spec, target_style, proto, rng, ev.gallery, ev.gallery_ids.size());
      ev.gallery_ids.push_back(base + static_cast<int>(i));
    }
  }
  return data;
}

}  // namespace damix::pipeline
