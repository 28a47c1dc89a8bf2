#pragma once

// Benchmark data: random-phase multisine excitation, the discrete-time
// nonlinear mass-spring-damper, dataset CSV I/O, and the best fit rate.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "lpvlfr/linalg.hpp"

namespace lpvlfr {

struct ParseError : std::runtime_error {
  ParseError(std::size_t line_no, const std::string& what)
      : std::runtime_error("line " + std::to_string(line_no) + ": " + what), line(line_no) {}
  std::size_t line;
};
struct SchemaError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct EmptyBand : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct DegenerateReference : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct DatasetMeta {
  std::uint64_t seed = 0;
  double sigma_e2 = 0.0;  // nominal output-noise variance
  double snr_db = std::numeric_limits<double>::quiet_NaN();
  std::size_t regenerations = 0;  // excitation redraws after a divergent run
};

/// Sampled signals, one row per sample. `d` may have zero columns.
struct Dataset {
  std::string name;
  double ts = 1.0;
  Mat u, d, y;
  DatasetMeta meta;
  std::optional<Mat> y_clean;  // noiseless output, when known

  std::size_t size() const noexcept { return y.rows(); }
  std::size_t n_u() const noexcept { return u.cols(); }
  std::size_t n_d() const noexcept { return d.cols(); }
  std::size_t n_y() const noexcept { return y.cols(); }

  void validate() const {
    if (u.rows() != y.rows() || d.rows() != y.rows())
      throw SchemaError("Dataset '" + name + "': channels have different lengths");
    if (y_clean && (y_clean->rows() != y.rows() || y_clean->cols() != y.cols()))
      throw SchemaError("Dataset '" + name + "': noiseless output shape differs from y");
    if (!(ts > 0.0)) throw SchemaError("Dataset '" + name + "': T_s must be positive");
  }
};

/// Sum of unit cosines on the DFT grid k / (N T_s) inside [f_lo, f_hi], with
/// iid uniform phases, rescaled to the requested standard deviation. DC and
/// the Nyquist bin are excluded, so the record is exactly zero-mean and
/// periodic.
template <class Rng>
std::vector<double> multisine(std::size_t n, double ts, double f_lo, double f_hi, double target_std, Rng& rng) {
  if (n < 2 || !(ts > 0.0)) throw std::invalid_argument("multisine: need N >= 2 and T_s > 0");
  if (!(f_lo < f_hi) || f_hi > 0.5 / ts * (1.0 + 1e-12))
    throw std::invalid_argument("multisine: need f_lo < f_hi <= 1 / (2 T_s)");
  const double df = 1.0 / (static_cast<double>(n) * ts);
  const double tol = 1e-9;
  std::vector<std::size_t> bins;
  for (std::size_t k = 1; 2 * k < n; ++k) {
    const double f = static_cast<double>(k) * df;
    if (f >= f_lo * (1.0 - tol) && f <= f_hi * (1.0 + tol)) bins.push_back(k);
  }
  if (bins.empty()) throw EmptyBand("multisine: no grid frequency inside the band");

  std::vector<double> cos_tab(n), sin_tab(n);
  for (std::size_t m = 0; m < n; ++m) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(m) / static_cast<double>(n);
    cos_tab[m] = std::cos(a);
    sin_tab[m] = std::sin(a);
  }
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
  std::vector<double> s(n, 0.0);
  for (std::size_t k : bins) {
    const double ph = phase(rng);
    const double c = std::cos(ph), sn = std::sin(ph);
    std::size_t m = 0;  // (k * t) mod N
    for (std::size_t t = 0; t < n; ++t) {
      s[t] += cos_tab[m] * c - sin_tab[m] * sn;
      m += k;
      if (m >= n) m -= n;
    }
  }
  double mean = 0.0;
  for (double v : s) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double v : s) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(n));
  for (double& v : s) v *= target_std / sd;
  return s;
}

struct MsdParams {
  double ts = 0.1;
  double m = 1.0;
  double k1 = 0.1;
  double k2 = 1.0;
  double d1 = 1.0;
};

struct MsdState {
  double x1 = 0.0;  // position
  double x2 = 0.0;  // velocity
};

/// x1+ = x1 + T_s x2
/// x2+ = x2 + (T_s / m)(u - (3/5) x1 u - k1 x1 - k2 x1^3 - d1 x2); y = x1.
inline MsdState msd_step(const MsdParams& prm, MsdState x, double u) noexcept {
  const double force = u - 0.6 * x.x1 * u - prm.k1 * x.x1 - prm.k2 * x.x1 * x.x1 * x.x1 - prm.d1 * x.x2;
  return {x.x1 + prm.ts * x.x2, x.x2 + prm.ts / prm.m * force};
}

enum class Split { train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

/// How the output noise level is chosen.
struct NoiseSpec {
  enum class Kind { variance, snr_db } kind = Kind::variance;
  double value = 0.063;

  static NoiseSpec variance(double v) { return {Kind::variance, v}; }
  static NoiseSpec snr(double db) { return {Kind::snr_db, db}; }
};

struct MsdProtocol {
  MsdParams params;
  double f_lo = 1.0 / 6.0;
  double f_hi = 5.0;
  double u_std = 4.0;
  std::size_t n_train = 6000;
  std::size_t n_val = 6000;
  std::size_t n_test = 30000;
  NoiseSpec noise;
  double divergence_bound = 1e3;  // |x| above this counts as a divergent run
};

inline double sample_variance(std::span<const double> v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - mean) * (x - mean);
  return s / static_cast<double>(v.size());
}

/// One split of the NL-MSD benchmark. Each split draws from its own stream
/// seeded by (seed, split). The system starts at rest; if a realization
/// diverges the phases are redrawn from the same stream.
inline Dataset generate_msd_dataset(Split split, std::uint64_t seed, const MsdProtocol& proto = {}) {
  const std::size_t n = split == Split::train ? proto.n_train : split == Split::val ? proto.n_val : proto.n_test;
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(split) + 1u, 0x4d5344u};
  std::mt19937_64 rng(seq);
  Dataset ds;
  ds.name = to_string(split);
  ds.ts = proto.params.ts;
  ds.meta.seed = seed;
  std::vector<double> u, y0(n);
  for (std::size_t attempt = 0;; ++attempt) {
    if (attempt == 100) throw std::runtime_error("generate_msd_dataset: every excitation realization diverged");
    u = multisine(n, proto.params.ts, proto.f_lo, proto.f_hi, proto.u_std, rng);
    MsdState x;
    bool ok = true;
    for (std::size_t k = 0; k < n; ++k) {
      y0[k] = x.x1;
      x = msd_step(proto.params, x, u[k]);
      if (!(std::abs(x.x1) < proto.divergence_bound && std::abs(x.x2) < proto.divergence_bound)) {
        ok = false;
        break;
      }
    }
    if (ok) {
      ds.meta.regenerations = attempt;
      break;
    }
  }
  const double var_clean = sample_variance(y0);
  const double sigma2 =
      proto.noise.kind == NoiseSpec::Kind::variance ? proto.noise.value : var_clean / std::pow(10.0, proto.noise.value / 10.0);
  std::normal_distribution<double> noise(0.0, std::sqrt(sigma2));
  ds.u = Mat(n, 1, u);
  ds.d = Mat(n, 0);
  Mat y(n, 1);
  for (std::size_t k = 0; k < n; ++k) y(k, 0) = y0[k] + noise(rng);
  ds.y = std::move(y);
  ds.y_clean = Mat(n, 1, y0);
  ds.meta.sigma_e2 = sigma2;
  ds.meta.snr_db = 10.0 * std::log10(var_clean / sigma2);
  return ds;
}

/// Best fit rate in percent: max(1 - sum ||y - yhat|| / sum ||y - mean(y)||, 0) * 100.
inline double bfr(const Mat& y, const Mat& yhat) {
  if (y.rows() != yhat.rows() || y.cols() != yhat.cols()) throw DimensionMismatch("bfr: shape mismatch");
  if (y.rows() < 2) throw std::invalid_argument("bfr: need at least two samples");
  const std::size_t n = y.rows(), ny = y.cols();
  std::vector<double> mean(ny, 0.0);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < ny; ++i) mean[i] += y(k, i);
  for (double& m : mean) m /= static_cast<double>(n);
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    double e2 = 0.0, r2 = 0.0;
    for (std::size_t i = 0; i < ny; ++i) {
      const double e = y(k, i) - yhat(k, i);
      const double r = y(k, i) - mean[i];
      e2 += e * e;
      r2 += r * r;
    }
    num += std::sqrt(e2);
    den += std::sqrt(r2);
  }
  if (den == 0.0) throw DegenerateReference("bfr: reference output is constant");
  return std::max(1.0 - num / den, 0.0) * 100.0;
}

// ---------------------------------------------------------------------------
// CSV: header `k,u1..u{n_u},d1..d{n_d},y1..y{n_y}`, shortest round-trip reals.

namespace detail {

inline std::string format_real(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const std::size_t c = line.find(',', start);
    out.push_back(line.substr(start, c == std::string_view::npos ? std::string_view::npos : c - start));
    if (c == std::string_view::npos) break;
    start = c + 1;
  }
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace detail

inline void write_csv(const Dataset& ds, const std::filesystem::path& path, const Mat* y_override = nullptr) {
  ds.validate();
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
  const Mat& y = y_override ? *y_override : ds.y;
  out << "k";
  for (std::size_t i = 0; i < ds.n_u(); ++i) out << ",u" << i + 1;
  for (std::size_t i = 0; i < ds.n_d(); ++i) out << ",d" << i + 1;
  for (std::size_t i = 0; i < ds.n_y(); ++i) out << ",y" << i + 1;
  out << '\n';
  std::string line;
  for (std::size_t k = 0; k < ds.size(); ++k) {
    line = std::to_string(k);
    for (std::size_t i = 0; i < ds.n_u(); ++i) line += ',' + detail::format_real(ds.u(k, i));
    for (std::size_t i = 0; i < ds.n_d(); ++i) line += ',' + detail::format_real(ds.d(k, i));
    for (std::size_t i = 0; i < ds.n_y(); ++i) line += ',' + detail::format_real(y(k, i));
    out << line << '\n';
  }
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

struct ChannelCounts {
  std::size_t n_u = 0, n_d = 0, n_y = 0;
};

/// Parses a dataset CSV. When `expect` is given, channel counts must match.
inline Dataset read_csv(const std::filesystem::path& path, std::optional<ChannelCounts> expect = std::nullopt) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line)) throw ParseError(1, "empty file '" + path.string() + "'");
  const auto header = detail::split_fields(line);
  if (header.empty() || detail::trim(header[0]) != "k") throw SchemaError("CSV header must start with column 'k'");
  ChannelCounts cnt;
  int stage = 0;  // u, then d, then y
  for (std::size_t c = 1; c < header.size(); ++c) {
    const auto h = detail::trim(header[c]);
    if (h.size() < 2) throw SchemaError("CSV header: bad column name '" + std::string(h) + "'");
    const int kind = h[0] == 'u' ? 0 : h[0] == 'd' ? 1 : h[0] == 'y' ? 2 : -1;
    if (kind < 0 || kind < stage) throw SchemaError("CSV header: unexpected column '" + std::string(h) + "'");
    stage = kind;
    std::size_t idx = 0;
    auto r = std::from_chars(h.data() + 1, h.data() + h.size(), idx);
    std::size_t& count = kind == 0 ? cnt.n_u : kind == 1 ? cnt.n_d : cnt.n_y;
    if (r.ec != std::errc() || r.ptr != h.data() + h.size() || idx != count + 1)
      throw SchemaError("CSV header: column '" + std::string(h) + "' out of sequence");
    ++count;
  }
  if (cnt.n_y == 0) throw SchemaError("CSV header: no output columns");
  if (expect && (expect->n_u != cnt.n_u || expect->n_d != cnt.n_d || expect->n_y != cnt.n_y))
    throw SchemaError("CSV '" + path.string() + "': channel counts (u=" + std::to_string(cnt.n_u) +
                      ", d=" + std::to_string(cnt.n_d) + ", y=" + std::to_string(cnt.n_y) +
                      ") do not match the expected (u=" + std::to_string(expect->n_u) +
                      ", d=" + std::to_string(expect->n_d) + ", y=" + std::to_string(expect->n_y) + ")");

  std::vector<double> u, d, y;
  std::size_t rows = 0, line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_fields(line);
    if (f.size() != header.size())
      throw ParseError(line_no, "expected " + std::to_string(header.size()) + " fields, got " + std::to_string(f.size()));
    for (std::size_t c = 1; c < f.size(); ++c) {
      const auto s = detail::trim(f[c]);
      double v = 0.0;
      auto r = std::from_chars(s.data(), s.data() + s.size(), v);
      if (r.ec != std::errc() || r.ptr != s.data() + s.size() || !std::isfinite(v))
        throw ParseError(line_no, "bad number '" + std::string(s) + "' in column " + std::to_string(c + 1));
      (c <= cnt.n_u ? u : c <= cnt.n_u + cnt.n_d ? d : y).push_back(v);
    }
    ++rows;
  }
  Dataset ds;
  ds.name = path.stem().string();
  ds.u = Mat(rows, cnt.n_u, std::move(u));
  ds.d = Mat(rows, cnt.n_d, std::move(d));
  ds.y = Mat(rows, cnt.n_y, std::move(y));
  return ds;
}

/// Sidecar path next to a dataset CSV: `<stem>.meta.json`.
inline std::filesystem::path meta_path(const std::filesystem::path& csv) {
  return csv.parent_path() / (csv.stem().string() + ".meta.json");
}
inline std::filesystem::path noiseless_path(const std::filesystem::path& csv) {
  return csv.parent_path() / (csv.stem().string() + ".noiseless.csv");
}

/// Writes the CSV, its metadata sidecar, and the noiseless companion CSV when
/// the noiseless output is known.
inline void write_dataset(const Dataset& ds, const std::filesystem::path& csv) {
  write_csv(ds, csv);
  nlohmann::ordered_json meta;
  meta["name"] = ds.name;
  meta["T_s"] = ds.ts;
  meta["N"] = ds.size();
  meta["seed"] = ds.meta.seed;
  meta["sigma_e2"] = ds.meta.sigma_e2;
  meta["snr_db"] = std::isfinite(ds.meta.snr_db) ? nlohmann::ordered_json(ds.meta.snr_db) : nullptr;
  meta["regenerations"] = ds.meta.regenerations;
  if (ds.y_clean) {
    write_csv(ds, noiseless_path(csv), &*ds.y_clean);
    meta["noiseless"] = noiseless_path(csv).filename().string();
  } else {
    meta["noiseless"] = nullptr;
  }
  std::ofstream out(meta_path(csv));
  if (!out) throw std::runtime_error("cannot write '" + meta_path(csv).string() + "'");
  out << meta.dump(2) << '\n';
}

/// Reads a dataset CSV plus its sidecar (if present).
inline Dataset read_dataset(const std::filesystem::path& csv, std::optional<ChannelCounts> expect = std::nullopt) {
  Dataset ds = read_csv(csv, expect);
  const auto mp = meta_path(csv);
  if (std::filesystem::exists(mp)) {
    std::ifstream in(mp);
    const auto meta = nlohmann::json::parse(in);
    ds.ts = meta.value("T_s", 1.0);
    ds.name = meta.value("name", ds.name);
    ds.meta.seed = meta.value("seed", std::uint64_t{0});
    ds.meta.sigma_e2 = meta.value("sigma_e2", 0.0);
    if (meta.contains("snr_db") && meta["snr_db"].is_number()) ds.meta.snr_db = meta["snr_db"].get<double>();
    ds.meta.regenerations = meta.value("regenerations", std::size_t{0});
    if (meta.contains("noiseless") && meta["noiseless"].is_string()) {
      const auto clean = read_csv(csv.parent_path() / meta["noiseless"].get<std::string>(),
                                  ChannelCounts{ds.n_u(), ds.n_d(), ds.n_y()});
      if (clean.size() != ds.size()) throw SchemaError("noiseless companion has a different length");
      ds.y_clean = clean.y;
    }
  }
  ds.validate();
  return ds;
}

}  // namespace lpvlfr
