#include "nsbert/model.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "nsbert/rng.hpp"

namespace nsbert {

Variant parse_variant(const std::string& s) {
  if (s == "ns") return Variant::non_stationary;
  if (s == "vanilla") return Variant::vanilla;
  throw ConfigError("model variant must be 'ns' or 'vanilla', got '" + s + "'");
}

std::string to_string(Variant v) { return v == Variant::non_stationary ? "ns" : "vanilla"; }

void EncoderConfig::validate() const {
  if (seq_len == 0 || input_features == 0 || hidden == 0 || layers == 0 || heads == 0 || feedforward == 0 ||
      projector_hidden == 0) {
    throw ConfigError("encoder sizes must be positive");
  }
  if (hidden % heads != 0) {
    throw ConfigError("hidden size " + std::to_string(hidden) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
}

void ModelConfig::validate() const {
  encoder.validate();
  if (classifier.gru_hidden == 0) throw ConfigError("GRU hidden size must be positive");
  if (classifier.num_classes < 2) throw ConfigError("classifier needs at least 2 classes");
}

// ---------------------------------------------------------------------------
// Series stationarization

template <class T>
Stationarized<T> stationarize(const Array<T>& x) {
  if (x.rank() != 2 && x.rank() != 3) throw ShapeError("stationarize expects [S, E] or [B, S, E], got " + to_string(x.shape()));
  const std::size_t batch = x.rank() == 3 ? x.dim(0) : 1;
  const std::size_t s = x.dim(x.rank() - 2), e = x.dim(x.rank() - 1);
  if (s < 2) throw ShapeError("stationarize needs at least 2 timesteps");
  Shape stat_shape = x.rank() == 3 ? Shape{batch, 1, e} : Shape{1, e};
  Stationarized<T> out{x, {Array<T>(stat_shape), Array<T>(stat_shape)}};
  for (std::size_t b = 0; b < batch; ++b) {
    const T* in = x.ptr() + b * s * e;
    T* norm = out.values.ptr() + b * s * e;
    for (std::size_t f = 0; f < e; ++f) {
      T m = 0;
      for (std::size_t t = 0; t < s; ++t) m += in[t * e + f];
      m /= static_cast<T>(s);
      T v = 0;
      for (std::size_t t = 0; t < s; ++t) v += (in[t * e + f] - m) * (in[t * e + f] - m);
      const T sd = std::max(std::sqrt(v / static_cast<T>(s)), static_cast<T>(kStationSigmaFloor));
      out.stats.mu[b * e + f] = m;
      out.stats.sigma[b * e + f] = sd;
      for (std::size_t t = 0; t < s; ++t) norm[t * e + f] = (in[t * e + f] - m) / sd;
    }
  }
  return out;
}

template <class T>
Array<T> destationarize(const Array<T>& y, const StationStats<T>& stats) {
  if (y.rank() < 2 || stats.mu.size() != stats.sigma.size()) throw ShapeError("destationarize: malformed inputs");
  const std::size_t s = y.dim(y.rank() - 2), e = y.dim(y.rank() - 1);
  const std::size_t batch = y.size() / (s * e);
  if (stats.mu.size() != batch * e) {
    throw ShapeError("destationarize: stats " + to_string(stats.mu.shape()) + " do not fit " + to_string(y.shape()));
  }
  Array<T> out = y;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < s; ++t)
      for (std::size_t f = 0; f < e; ++f) {
        T& v = out[(b * s + t) * e + f];
        v = stats.sigma[b * e + f] * v + stats.mu[b * e + f];
      }
  return out;
}

// ---------------------------------------------------------------------------
// Parameters

namespace {

template <class T>
Array<T> xavier(std::size_t fan_in, std::size_t fan_out, Rng& rng, double gain = 1.0) {
  const double a = gain * std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-a, a);
  Array<T> w({fan_in, fan_out});
  for (auto& v : w.data()) v = static_cast<T>(dist(rng));
  return w;
}

template <class T>
Array<T> uniform(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Array<T> w(std::move(shape));
  for (auto& v : w.data()) v = static_cast<T>(dist(rng));
  return w;
}

template <class T>
Array<T> normal(Shape shape, double sd, Rng& rng) {
  std::normal_distribution<double> dist(0.0, sd);
  Array<T> w(std::move(shape));
  for (auto& v : w.data()) v = static_cast<T>(dist(rng));
  return w;
}

std::string layer_prefix(std::size_t l) { return "layer" + std::to_string(l) + "."; }

}  // namespace

bool is_encoder_param(const std::string& name) { return !name.starts_with("gru.") && !name.starts_with("cls."); }

template <class T>
ParamSet<T> init_encoder_params(const EncoderConfig& c, std::uint64_t seed) {
  c.validate();
  ParamSet<T> p;
  auto rng_for = [seed](const std::string& name) { return Rng(derive_seed(seed, "init:" + name)); };
  auto add_linear = [&](const std::string& name, std::size_t in, std::size_t out, double gain = 1.0,
                        bool bias = true) {
    Rng rng = rng_for(name);
    p[name + ".weight"] = xavier<T>(in, out, rng, gain);
    if (bias) p[name + ".bias"] = Array<T>({out});
  };
  auto add_norm = [&](const std::string& name, std::size_t n) {
    p[name + ".gain"] = Array<T>({n}, T{1});
    p[name + ".bias"] = Array<T>({n});
  };

  add_linear("embed", c.input_features, c.hidden);
  {
    Rng rng = rng_for("embed.position");
    p["embed.position"] = normal<T>({c.seq_len, c.hidden}, 0.02, rng);
  }
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string pre = layer_prefix(l);
    // Softmax cancels a key bias (it shifts each score row by a constant), so keys have none.
    add_linear(pre + "attn.q", c.hidden, c.hidden);
    add_linear(pre + "attn.k", c.hidden, c.hidden, 1.0, false);
    add_linear(pre + "attn.v", c.hidden, c.hidden);
    add_linear(pre + "attn.o", c.hidden, c.hidden);
    add_norm(pre + "norm1", c.hidden);
    add_linear(pre + "ffn.in", c.hidden, c.feedforward);
    add_linear(pre + "ffn.out", c.feedforward, c.hidden);
    add_norm(pre + "norm2", c.hidden);
  }
  if (c.variant == Variant::non_stationary) {
    p["tau.pool"] = Array<T>({c.seq_len, 1}, static_cast<T>(1.0 / static_cast<double>(c.seq_len)));
    add_linear("tau.hidden", 2 * c.input_features, c.projector_hidden);
    add_linear("tau.out", c.projector_hidden, 1, 0.1);
    add_linear("delta.hidden", 2 * c.input_features, c.projector_hidden);
    add_linear("delta.out", c.projector_hidden, 1, 0.1, false);  // a shared shift of delta is equally inert
  }
  add_linear("decoder", c.hidden, c.input_features);
  return p;
}

template <class T>
ParamSet<T> init_classifier_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t h = config.encoder.hidden, g = config.classifier.gru_hidden;
  const double bound = 1.0 / std::sqrt(static_cast<double>(g));
  ParamSet<T> p;
  auto rng_for = [seed](const std::string& name) { return Rng(derive_seed(seed, "init:" + name)); };
  for (auto [name, shape] : {std::pair{"gru.weight_ih", Shape{h, 3 * g}}, std::pair{"gru.weight_hh", Shape{g, 3 * g}},
                             std::pair{"gru.bias_ih", Shape{3 * g}}, std::pair{"gru.bias_hh", Shape{3 * g}}}) {
    Rng rng = rng_for(name);
    p[name] = uniform<T>(shape, bound, rng);
  }
  Rng rng = rng_for("cls.weight");
  p["cls.weight"] = xavier<T>(g, config.classifier.num_classes, rng);
  p["cls.bias"] = Array<T>({config.classifier.num_classes});
  return p;
}

// ---------------------------------------------------------------------------
// Graph building

namespace {

template <class T>
Var<T> linear(ParamBinder<T>& p, Var<T> x, const std::string& name) {
  return add(matmul(x, p(name + ".weight")), p(name + ".bias"));
}

template <class T>
Var<T> layer_norm(ParamBinder<T>& p, Var<T> x, const std::string& name) {
  const std::size_t last = x.shape().size() - 1;
  Var<T> centered = sub(x, mean(x, last));
  Var<T> denom = sqrt(add_scalar(variance(x, last), static_cast<T>(kLayerNormEps)));
  return add(mul(div(centered, denom), p(name + ".gain")), p(name + ".bias"));
}

template <class T>
Var<T> dropout(Var<T> x, double rate, std::uint64_t seed) {
  Rng rng(seed);
  std::bernoulli_distribution keep(1.0 - rate);
  const T kept = static_cast<T>(1.0 / (1.0 - rate));
  Array<T> mask(x.shape());
  for (auto& m : mask.data()) m = keep(rng) ? kept : T{0};
  return mul(x, x.tape().constant(std::move(mask)));
}

template <class T>
Array<T> as_batch(const Array<T>& a) {
  if (a.rank() == 3) return a;
  if (a.rank() == 2) return a.reshaped({1, a.dim(0), a.dim(1)});
  throw ShapeError("expected rank 2 or 3, got " + to_string(a.shape()));
}

template <class T>
T inv_sqrt(std::size_t d) {
  return static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
}

template <class T>
Var<T> gru_cell(ParamBinder<T>& p, Var<T> gx, Var<T> h, std::size_t g) {
  Var<T> gh = add(matmul(h, p("gru.weight_hh")), p("gru.bias_hh"));
  Var<T> r = sigmoid(add(slice(gx, 1, 0, g), slice(gh, 1, 0, g)));
  Var<T> z = sigmoid(add(slice(gx, 1, g, g), slice(gh, 1, g, g)));
  Var<T> n = tanh(add(slice(gx, 1, 2 * g, g), mul(r, slice(gh, 1, 2 * g, g))));
  // (1 - z) * n + z * h
  return add(n, mul(z, sub(h, n)));
}

}  // namespace

template <class T>
TauDelta<T> tau_delta_project(ParamBinder<T>& p, const StationStats<T>& stats, const Array<T>& x_raw) {
  Tape<T>& tape = p.tape();
  const Array<T> x = as_batch(x_raw);
  const std::size_t b = x.dim(0), s = x.dim(1), e = x.dim(2);
  const Array<T> mu = stats.mu.reshaped({b, 1, e});
  const Array<T> sigma = stats.sigma.reshaped({b, 1, e});
  Var<T> xc = tape.constant(x);

  Var<T> pooled = reshape(matmul(transpose_last(xc), p("tau.pool")), {b, 1, e});
  const Var<T> tau_in[] = {tape.constant(sigma), pooled};
  Var<T> tau_hidden = tanh(linear(p, concat<T>(tau_in, 2), "tau.hidden"));
  Var<T> tau = exp(linear(p, tau_hidden, "tau.out"));

  Var<T> w = p("delta.hidden.weight");
  Var<T> from_mu = add(matmul(tape.constant(mu), slice(w, 0, 0, e)), p("delta.hidden.bias"));
  Var<T> delta_hidden = tanh(add(matmul(xc, slice(w, 0, e, e)), from_mu));
  Var<T> delta = reshape(matmul(delta_hidden, p("delta.out.weight")), {b, 1, s});
  return {tau, delta};
}

template <class T>
Var<T> destationary_attention(Var<T> q, Var<T> k, Var<T> v, Var<T> tau, Var<T> delta) {
  for (T t : tau.value().data()) {
    if (!(t > T{0})) throw NumericError("de-stationary attention requires tau > 0");
  }
  const T c = inv_sqrt<T>(q.shape().back());
  return matmul(attention_softmax(matmul(q, k, true), c, std::optional(tau), std::optional(delta)), v);
}

template <class T>
Var<T> scaled_dot_attention(Var<T> q, Var<T> k, Var<T> v) {
  return matmul(attention_softmax(matmul(q, k, true), inv_sqrt<T>(q.shape().back())), v);
}

template <class T>
Encoded<T> encode(ParamBinder<T>& p, const Array<T>& x, const EncoderConfig& c, const ForwardOptions& options) {
  if (x.rank() != 3 || x.dim(1) != c.seq_len || x.dim(2) != c.input_features) {
    throw ShapeError("encoder expects [B, " + std::to_string(c.seq_len) + ", " + std::to_string(c.input_features) +
                     "], got " + to_string(x.shape()));
  }
  Tape<T>& tape = p.tape();
  Encoded<T> out;
  Var<T> input;
  std::optional<TauDelta<T>> td;
  if (c.variant == Variant::non_stationary) {
    Stationarized<T> st = stationarize(x);
    input = tape.constant(std::move(st.values));
    out.stats = std::move(st.stats);
    out.stationarized = true;
    td = tau_delta_project(p, out.stats, x);
  } else {
    input = tape.constant(x);
  }

  const bool drop = options.train && c.dropout > 0.0;
  Var<T> h = add(linear(p, input, "embed"), p("embed.position"));
  const std::size_t d = c.head_dim();
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string pre = layer_prefix(l);
    Var<T> q = linear(p, h, pre + "attn.q");
    Var<T> k = matmul(h, p(pre + "attn.k.weight"));
    Var<T> v = linear(p, h, pre + "attn.v");
    std::vector<Var<T>> heads;
    for (std::size_t i = 0; i < c.heads; ++i) {
      Var<T> qh = slice(q, 2, i * d, d), kh = slice(k, 2, i * d, d), vh = slice(v, 2, i * d, d);
      heads.push_back(td ? destationary_attention(qh, kh, vh, td->tau, td->delta) : scaled_dot_attention(qh, kh, vh));
    }
    Var<T> a = linear(p, concat<T>(heads, 2), pre + "attn.o");
    if (drop) a = dropout(a, c.dropout, derive_seed(options.dropout_seed, "dropout", l, 0));
    h = layer_norm(p, add(h, a), pre + "norm1");
    Var<T> f = linear(p, gelu(linear(p, h, pre + "ffn.in")), pre + "ffn.out");
    if (drop) f = dropout(f, c.dropout, derive_seed(options.dropout_seed, "dropout", l, 1));
    h = layer_norm(p, add(h, f), pre + "norm2");
  }
  out.hidden = h;
  return out;
}

template <class T>
Var<T> decode(ParamBinder<T>& p, const Encoded<T>& encoded, const EncoderConfig& c) {
  const Shape& hs = encoded.hidden.shape();
  if (hs.size() != 3 || hs[2] != c.hidden) throw ShapeError("decoder expects [B, S, " + std::to_string(c.hidden) + "]");
  Var<T> y = linear(p, encoded.hidden, "decoder");
  if (!encoded.stationarized) return y;
  Tape<T>& tape = p.tape();
  return add(mul(y, tape.constant(encoded.stats.sigma)), tape.constant(encoded.stats.mu));
}

template <class T>
Var<T> gru_step(ParamBinder<T>& p, Var<T> x, Var<T> h, std::size_t gru_hidden) {
  return gru_cell(p, add(matmul(x, p("gru.weight_ih")), p("gru.bias_ih")), h, gru_hidden);
}

template <class T>
Var<T> classifier_logits(ParamBinder<T>& p, Var<T> hidden, const ModelConfig& config) {
  const Shape& hs = hidden.shape();
  if (hs.size() != 3 || hs[2] != config.encoder.hidden) {
    throw ShapeError("classifier expects [B, S, " + std::to_string(config.encoder.hidden) + "], got " + to_string(hs));
  }
  const std::size_t b = hs[0], s = hs[1], g = config.classifier.gru_hidden;
  Var<T> gx = add(matmul(hidden, p("gru.weight_ih")), p("gru.bias_ih"));  // all timesteps at once
  Var<T> h = p.tape().constant(Array<T>({b, g}));
  for (std::size_t t = 0; t < s; ++t) h = gru_cell(p, reshape(slice(gx, 1, t, 1), {b, 3 * g}), h, g);
  return linear(p, h, "cls");
}

template <class T>
Var<T> classify(ParamBinder<T>& p, Var<T> hidden, const ModelConfig& config) {
  return softmax(classifier_logits(p, hidden, config));
}

#define NSBERT_INSTANTIATE(T)                                                                               \
  template Stationarized<T> stationarize(const Array<T>&);                                                  \
  template Array<T> destationarize(const Array<T>&, const StationStats<T>&);                                \
  template ParamSet<T> init_encoder_params<T>(const EncoderConfig&, std::uint64_t);                         \
  template ParamSet<T> init_classifier_params<T>(const ModelConfig&, std::uint64_t);                        \
  template TauDelta<T> tau_delta_project(ParamBinder<T>&, const StationStats<T>&, const Array<T>&);         \
  template Var<T> destationary_attention(Var<T>, Var<T>, Var<T>, Var<T>, Var<T>);                           \
  template Var<T> scaled_dot_attention(Var<T>, Var<T>, Var<T>);                                             \
  template Encoded<T> encode(ParamBinder<T>&, const Array<T>&, const EncoderConfig&, const ForwardOptions&); \
  template Var<T> decode(ParamBinder<T>&, const Encoded<T>&, const EncoderConfig&);                         \
  template Var<T> gru_step(ParamBinder<T>&, Var<T>, Var<T>, std::size_t);                                   \
  template Var<T> classifier_logits(ParamBinder<T>&, Var<T>, const ModelConfig&);                           \
  template Var<T> classify(ParamBinder<T>&, Var<T>, const ModelConfig&);

NSBERT_INSTANTIATE(float)
NSBERT_INSTANTIATE(double)

#undef NSBERT_INSTANTIATE

}  // namespace nsbert
