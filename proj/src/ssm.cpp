#include "gem/ssm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "gem/parallel.hpp"
#include "gem/vecmath.hpp"

namespace gem::ssm {

template <typename T>
void ScanInputs<T>::validate() const {
  const auto L = static_cast<size_t>(length), D = static_cast<size_t>(channels), N = static_cast<size_t>(states);
  if (length < 1 || channels < 1 || states < 1) throw Error("selective scan: L, D and N must be positive");
  if (x.size() != L * D || delta.size() != L * D) throw Error("selective scan: x/delta must be [L, D]");
  if (a_log.size() != D * N) throw Error("selective scan: a_log must be [D, N]");
  if (B.size() != L * N || C.size() != L * N) throw Error("selective scan: B/C must be [L, N]");
  if (d_skip.size() != D) throw Error("selective scan: skip must be [D]");
}

namespace {

template <typename T>
std::vector<T> decay_rates(const ScanInputs<T>& in) {
  std::vector<T> A(in.a_log.size());
  for (size_t i = 0; i < A.size(); ++i) A[i] = -std::exp(in.a_log[i]);
  return A;
}

template <typename T>
void check_initial_state(const ScanInputs<T>& in, std::span<const T> h0) {
  if (!h0.empty() && h0.size() != static_cast<size_t>(in.channels * in.states)) {
    throw Error("selective scan: initial state must be [D, N]");
  }
}

// Runs the recurrence over [begin, end) from state h; writes y when given.
template <typename T>
void scan_range(const ScanInputs<T>& in, const std::vector<T>& A, int64_t begin, int64_t end, std::vector<T>& h,
                T* y) {
  const int64_t D = in.channels, N = in.states;
  for (int64_t t = begin; t < end; ++t) {
    for (int64_t d = 0; d < D; ++d) {
      const T dt = in.delta[static_cast<size_t>(t * D + d)];
      const T xv = in.x[static_cast<size_t>(t * D + d)];
      T acc = 0;
      for (int64_t n = 0; n < N; ++n) {
        const size_t k = static_cast<size_t>(d * N + n);
        const T a = std::exp(dt * A[k]);
        h[k] = a * h[k] + dt * in.B[static_cast<size_t>(t * N + n)] * xv;
        acc += in.C[static_cast<size_t>(t * N + n)] * h[k];
      }
      if (y) y[t * D + d] = acc + in.d_skip[static_cast<size_t>(d)] * xv;
    }
  }
}

// Aggregate (decay product, increment) of a chunk started from zero state.
template <typename T>
void chunk_aggregate(const ScanInputs<T>& in, const std::vector<T>& A, int64_t begin, int64_t end,
                     std::vector<T>& decay, std::vector<T>& incr) {
  const int64_t D = in.channels, N = in.states;
  std::fill(decay.begin(), decay.end(), T(1));
  std::fill(incr.begin(), incr.end(), T(0));
  for (int64_t t = begin; t < end; ++t)
    for (int64_t d = 0; d < D; ++d) {
      const T dt = in.delta[static_cast<size_t>(t * D + d)];
      const T xv = in.x[static_cast<size_t>(t * D + d)];
      for (int64_t n = 0; n < N; ++n) {
        const size_t k = static_cast<size_t>(d * N + n);
        const T a = std::exp(dt * A[k]);
        decay[k] *= a;
        incr[k] = a * incr[k] + dt * in.B[static_cast<size_t>(t * N + n)] * xv;
      }
    }
}

}  // namespace

template <typename T>
std::vector<T> selective_scan_sequential(const ScanInputs<T>& in, std::span<const T> h0, std::vector<T>* h_final) {
  in.validate();
  check_initial_state(in, h0);
  const std::vector<T> A = decay_rates(in);
  std::vector<T> h(static_cast<size_t>(in.channels * in.states), T(0));
  if (!h0.empty()) std::copy(h0.begin(), h0.end(), h.begin());
  std::vector<T> y(static_cast<size_t>(in.length * in.channels));
  scan_range(in, A, 0, in.length, h, y.data());
  if (h_final) *h_final = h;
  return y;
}

template <typename T>
std::vector<T> selective_scan_parallel(const ScanInputs<T>& in, std::span<const T> h0, std::vector<T>* h_final) {
  in.validate();
  check_initial_state(in, h0);
  const std::vector<T> A = decay_rates(in);
  const size_t S = static_cast<size_t>(in.channels * in.states);
  // Fixed chunking keeps the result independent of the worker count.
  const int64_t chunks = std::min<int64_t>(in.length, 16);
  auto bound = [&](int64_t j) { return j * in.length / chunks; };

  std::vector<std::vector<T>> decay(static_cast<size_t>(chunks), std::vector<T>(S));
  std::vector<std::vector<T>> incr(static_cast<size_t>(chunks), std::vector<T>(S));
  parallel_for(chunks, [&](int64_t j) {
    chunk_aggregate(in, A, bound(j), bound(j + 1), decay[static_cast<size_t>(j)], incr[static_cast<size_t>(j)]);
  });

  // Hillis-Steele inclusive scan over chunk aggregates with the associative
  // combine (a1, b1) . (a2, b2) = (a1 a2, a2 b1 + b2).
  for (int64_t stride = 1; stride < chunks; stride *= 2) {
    auto prev_decay = decay;
    auto prev_incr = incr;
    for (int64_t j = stride; j < chunks; ++j) {
      const auto& a1 = prev_decay[static_cast<size_t>(j - stride)];
      const auto& b1 = prev_incr[static_cast<size_t>(j - stride)];
      auto& a2 = decay[static_cast<size_t>(j)];
      auto& b2 = incr[static_cast<size_t>(j)];
      for (size_t k = 0; k < S; ++k) {
        b2[k] = prev_decay[static_cast<size_t>(j)][k] * b1[k] + prev_incr[static_cast<size_t>(j)][k];
        a2[k] = a1[k] * prev_decay[static_cast<size_t>(j)][k];
      }
    }
  }

  // Carry-in state of chunk j is the prefix through chunk j-1 applied to h0.
  std::vector<T> init(S, T(0));
  if (!h0.empty()) std::copy(h0.begin(), h0.end(), init.begin());
  auto carry_into = [&](int64_t j) {
    std::vector<T> h = init;
    if (j == 0) return h;
    const auto& a = decay[static_cast<size_t>(j - 1)];
    const auto& b = incr[static_cast<size_t>(j - 1)];
    for (size_t k = 0; k < S; ++k) h[k] = a[k] * h[k] + b[k];
    return h;
  };

  std::vector<T> y(static_cast<size_t>(in.length * in.channels));
  parallel_for(chunks, [&](int64_t j) {
    std::vector<T> h = carry_into(j);
    scan_range(in, A, bound(j), bound(j + 1), h, y.data());
  });
  if (h_final) *h_final = carry_into(chunks);
  return y;
}

template struct ScanInputs<float>;
template struct ScanInputs<double>;
template std::vector<float> selective_scan_sequential(const ScanInputs<float>&, std::span<const float>,
                                                      std::vector<float>*);
template std::vector<double> selective_scan_sequential(const ScanInputs<double>&, std::span<const double>,
                                                       std::vector<double>*);
template std::vector<float> selective_scan_parallel(const ScanInputs<float>&, std::span<const float>,
                                                    std::vector<float>*);
template std::vector<double> selective_scan_parallel(const ScanInputs<double>&, std::span<const double>,
                                                     std::vector<double>*);

nn::Var selective_scan(const nn::Var& x, const nn::Var& delta, const nn::Var& a_log, const nn::Var& B,
                       const nn::Var& C, const nn::Var& d_skip) {
  if (x.value().rank() != 2) throw Error("selective_scan: x must be [L, D]");
  const int64_t L = x.dim(0), D = x.dim(1);
  if (a_log.value().rank() != 2 || a_log.dim(0) != D) throw Error("selective_scan: a_log must be [D, N]");
  const int64_t N = a_log.dim(1);
  require_shape(delta.value(), {L, D}, "selective_scan delta");
  require_shape(B.value(), {L, N}, "selective_scan B");
  require_shape(C.value(), {L, N}, "selective_scan C");
  require_shape(d_skip.value(), {D}, "selective_scan skip");

  const double* xd = x.value().data();
  const double* dd = delta.value().data();
  const double* bd = B.value().data();
  const double* cd = C.value().data();
  std::vector<double> A(static_cast<size_t>(D * N));
  for (size_t i = 0; i < A.size(); ++i) A[i] = -std::exp(a_log.value()[static_cast<int64_t>(i)]);

  // States h_t and decays exp(delta_t A) of every step are kept for the
  // backward sweep.
  const bool keep = nn::grad_enabled();
  const size_t S = static_cast<size_t>(D * N);
  std::vector<double> states(keep ? static_cast<size_t>(L) * S : 0);
  std::vector<double> decays(keep ? static_cast<size_t>(L) * S : 0);
  std::vector<double> h(S, 0.0), arg(S), a(S);
  Tensor y({L, D});
  for (int64_t t = 0; t < L; ++t) {
    for (int64_t d = 0; d < D; ++d)
      for (int64_t n = 0; n < N; ++n) arg[static_cast<size_t>(d * N + n)] = dd[t * D + d] * A[static_cast<size_t>(d * N + n)];
    vec::exp(arg.data(), a.data(), D * N);
    for (int64_t d = 0; d < D; ++d) {
      const double dt = dd[t * D + d], xv = xd[t * D + d];
      double acc = 0.0;
      for (int64_t n = 0; n < N; ++n) {
        const size_t k = static_cast<size_t>(d * N + n);
        h[k] = a[k] * h[k] + dt * bd[t * N + n] * xv;
        acc += cd[t * N + n] * h[k];
      }
      y[t * D + d] = acc + d_skip.value()[d] * xv;
    }
    if (keep) {
      std::copy(h.begin(), h.end(), states.begin() + static_cast<std::ptrdiff_t>(t * D * N));
      std::copy(a.begin(), a.end(), decays.begin() + static_cast<std::ptrdiff_t>(t * D * N));
    }
  }

  return nn::make_result(std::move(y), {x, delta, a_log, B, C, d_skip},
                         [states = std::move(states), decays = std::move(decays), A = std::move(A), L, D,
                          N](nn::Node& self) {
    auto grad_of = [&](size_t i) -> double* {
      auto& p = self.parents[i];
      return p->requires_grad ? p->grad_buffer().data() : nullptr;
    };
    double* gx = grad_of(0);
    double* gdelta = grad_of(1);
    double* galog = grad_of(2);
    double* gB = grad_of(3);
    double* gC = grad_of(4);
    double* gskip = grad_of(5);
    const double* xd = self.parents[0]->value.data();
    const double* dd = self.parents[1]->value.data();
    const double* bd = self.parents[3]->value.data();
    const double* cd = self.parents[4]->value.data();
    const double* sd = self.parents[5]->value.data();
    const double* gy = self.grad.data();

    std::vector<double> gh(static_cast<size_t>(D * N), 0.0);
    std::vector<double> gA(static_cast<size_t>(D * N), 0.0);
    for (int64_t t = L - 1; t >= 0; --t) {
      const double* ht = states.data() + t * D * N;
      const double* hp = t > 0 ? states.data() + (t - 1) * D * N : nullptr;
      const double* at = decays.data() + t * D * N;
      for (int64_t d = 0; d < D; ++d) {
        const double g = gy[t * D + d];
        const double dt = dd[t * D + d], xv = xd[t * D + d];
        if (gskip) gskip[d] += g * xv;
        double gxv = g * sd[d];
        double gdt = 0.0;
        for (int64_t n = 0; n < N; ++n) {
          const size_t k = static_cast<size_t>(d * N + n);
          if (gC) gC[t * N + n] += g * ht[k];
          const double ghk = gh[k] + g * cd[t * N + n];
          const double a = at[k];
          const double ga = hp ? ghk * hp[k] * a : 0.0;
          gdt += ga * A[k] + ghk * bd[t * N + n] * xv;
          gA[k] += ga * dt;
          if (gB) gB[t * N + n] += ghk * dt * xv;
          gxv += ghk * dt * bd[t * N + n];
          gh[k] = ghk * a;
        }
        if (gx) gx[t * D + d] += gxv;
        if (gdelta) gdelta[t * D + d] += gdt;
      }
    }
    if (galog)
      for (size_t k = 0; k < gA.size(); ++k) galog[k] += gA[k] * A[k];
  });
}

TokenSequence ring_major(const nn::Var& grid) {
  if (grid.value().rank() != 3) throw Error("ring_major: expected [H, W, C]");
  const int64_t L = grid.dim(0) * grid.dim(1);
  TokenSequence seq{nn::reshape(grid, {L, grid.dim(2)}), std::vector<int64_t>(static_cast<size_t>(L))};
  std::iota(seq.order.begin(), seq.order.end(), 0);
  return seq;
}

MambaBlock::MambaBlock(const MambaConfig& c, Rng& rng) : cfg(c), norm(c.d_model) {
  if (cfg.d_model < 1 || cfg.d_state < 1 || cfg.expand < 1 || cfg.conv_width < 1) {
    throw Error("mamba block: dimensions must be positive");
  }
  if (cfg.dt_rank <= 0) cfg.dt_rank = (cfg.d_model + 15) / 16;
  const int64_t E = inner(), N = cfg.d_state, R = cfg.dt_rank, K = cfg.conv_width;
  in_x = nn::Linear(cfg.d_model, E, rng, false);
  in_z = nn::Linear(cfg.d_model, E, rng, false);
  const double cb = 1.0 / std::sqrt(static_cast<double>(K));
  conv_w = nn::parameter(rng.uniform_tensor({K, E}, -cb, cb));
  conv_b = nn::parameter(rng.uniform_tensor({E}, -cb, cb));
  x_dt = nn::Linear(E, R, rng, false);
  x_B = nn::Linear(E, N, rng, false);
  x_C = nn::Linear(E, N, rng, false);
  dt_proj = nn::Linear(R, E, rng, true);
  // Step sizes start log-uniform in [1e-3, 1e-1]; the bias stores softplus^-1.
  for (int64_t e = 0; e < E; ++e) {
    const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
    dt_proj.bias.mutable_value()[e] = dt + std::log(-std::expm1(-dt));
  }
  Tensor al({E, N});
  for (int64_t e = 0; e < E; ++e)
    for (int64_t n = 0; n < N; ++n) al[e * N + n] = std::log(static_cast<double>(n + 1));
  a_log = nn::parameter(std::move(al));
  d_skip = nn::parameter(Tensor({E}, 1.0));
  out = nn::Linear(E, cfg.d_model, rng, false);
}

nn::Var MambaBlock::mix(const nn::Var& u) const {
  nn::Var xc = nn::silu(nn::causal_conv1d(in_x(u), conv_w, conv_b));
  nn::Var delta = nn::softplus(dt_proj(x_dt(xc)));
  return selective_scan(xc, delta, a_log, x_B(xc), x_C(xc), d_skip);
}

nn::Var MambaBlock::operator()(const nn::Var& x) const {
  if (x.value().rank() != 2 || x.dim(1) != cfg.d_model) {
    throw Error("mamba block: expected [L, " + std::to_string(cfg.d_model) + "], got " + shape_str(x.shape()));
  }
  nn::Var u = norm(x);
  nn::Var y = mix(u);
  if (cfg.bidirectional) y = nn::scale(nn::add(y, nn::reverse0(mix(nn::reverse0(u)))), 0.5);
  y = nn::mul(y, nn::silu(in_z(u)));
  return nn::add(x, out(y));
}

void MambaBlock::collect(nn::ParamList& list, const std::string& prefix) const {
  norm.collect(list, prefix + ".norm");
  in_x.collect(list, prefix + ".in_x");
  in_z.collect(list, prefix + ".in_z");
  list.push_back({prefix + ".conv_w", conv_w});
  list.push_back({prefix + ".conv_b", conv_b});
  x_dt.collect(list, prefix + ".x_dt");
  x_B.collect(list, prefix + ".x_B");
  x_C.collect(list, prefix + ".x_C");
  dt_proj.collect(list, prefix + ".dt_proj");
  list.push_back({prefix + ".a_log", a_log});
  list.push_back({prefix + ".d_skip", d_skip});
  out.collect(list, prefix + ".out");
}

}  // namespace gem::ssm
