#pragma once

// A self-scheduled (or externally scheduled) LPV-LFR model: plant, optional
// well-posed D_zw factors, scheduling map, initial state and data scalers,
// plus its flat parameter vector and the JSON model document.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "lpvlfr/bench.hpp"
#include "lpvlfr/lfr.hpp"
#include "lpvlfr/sched.hpp"

namespace lpvlfr {

enum class Dependency { affine, rational };
enum class SchedulingKind { network, exogenous };

inline std::string to_string(Dependency d) { return d == Dependency::affine ? "affine" : "rational"; }
inline Dependency parse_dependency(const std::string& s) {
  if (s == "affine") return Dependency::affine;
  if (s == "rational") return Dependency::rational;
  throw std::invalid_argument("unknown model mode '" + s + "' (expected affine|rational)");
}
inline std::string to_string(SchedulingKind k) { return k == SchedulingKind::network ? "network" : "exogenous"; }

struct ModelStructure {
  Dependency mode = Dependency::rational;
  std::size_t n_x = 1, n_u = 1, n_y = 1, n_d = 0;
  DeltaStructure delta;
  SchedulingKind scheduling = SchedulingKind::network;
  std::vector<std::size_t> hidden;  // scheduling net hidden layer sizes
  double epsilon = 1e-3;

  std::size_t n_p() const noexcept { return delta.n_p(); }
  std::size_t n_w() const noexcept { return delta.n_w(); }
  NetShape net_shape() const { return {n_x, n_u, n_d, n_p(), hidden}; }

  void validate() const {
    if (n_x == 0 || n_y == 0) throw std::invalid_argument("ModelStructure: n_x and n_y must be positive");
    if (scheduling == SchedulingKind::exogenous && n_d != n_p())
      throw DimensionMismatch("ModelStructure: exogenous scheduling needs n_d == n_p");
    if (mode == Dependency::rational && !(epsilon > 0.0 && epsilon <= 0.1))
      throw std::invalid_argument("ModelStructure: need 0 < epsilon <= 0.1");
  }
  friend bool operator==(const ModelStructure&, const ModelStructure&) = default;
};

/// Channel-wise affine scaling: scaled = (raw - mean) / std.
struct DataScalers {
  std::vector<double> u_mean, u_std, y_mean, y_std;
  friend bool operator==(const DataScalers&, const DataScalers&) = default;
};

inline DataScalers compute_scalers(const Dataset& ds) {
  DataScalers s;
  auto stats = [](const Mat& m, std::vector<double>& mean, std::vector<double>& sd) {
    mean.assign(m.cols(), 0.0);
    sd.assign(m.cols(), 1.0);
    for (std::size_t j = 0; j < m.cols(); ++j) {
      double a = 0.0;
      for (std::size_t k = 0; k < m.rows(); ++k) a += m(k, j);
      a /= static_cast<double>(m.rows());
      double v = 0.0;
      for (std::size_t k = 0; k < m.rows(); ++k) v += (m(k, j) - a) * (m(k, j) - a);
      v = std::sqrt(v / static_cast<double>(m.rows()));
      mean[j] = a;
      sd[j] = v > 0.0 ? v : 1.0;
    }
  };
  stats(ds.u, s.u_mean, s.u_std);
  stats(ds.y, s.y_mean, s.y_std);
  return s;
}

inline Mat scale_columns(const Mat& m, const std::vector<double>& mean, const std::vector<double>& sd) {
  Mat out = m;
  for (std::size_t k = 0; k < m.rows(); ++k)
    for (std::size_t j = 0; j < m.cols(); ++j) out(k, j) = (m(k, j) - mean[j]) / sd[j];
  return out;
}
inline Mat unscale_columns(const Mat& m, const std::vector<double>& mean, const std::vector<double>& sd) {
  Mat out = m;
  for (std::size_t k = 0; k < m.rows(); ++k)
    for (std::size_t j = 0; j < m.cols(); ++j) out(k, j) = m(k, j) * sd[j] + mean[j];
  return out;
}

/// Dataset in the model's internal units (u and y scaled, d untouched).
inline Dataset apply_scalers(const Dataset& ds, const std::optional<DataScalers>& s) {
  if (!s) return ds;
  Dataset out = ds;
  out.u = scale_columns(ds.u, s->u_mean, s->u_std);
  out.y = scale_columns(ds.y, s->y_mean, s->y_std);
  if (ds.y_clean) out.y_clean = scale_columns(*ds.y_clean, s->y_mean, s->y_std);
  return out;
}

struct Model {
  ModelStructure structure;
  LfrPlant plant;  // in rational mode D_zw = build_Dzw(*factors)
  std::optional<WellPosedFactors> factors;
  SchedulingNet net;  // unused for exogenous scheduling
  std::vector<double> x0;
  std::optional<DataScalers> scalers;

  friend bool operator==(const Model&, const Model&) = default;
};

/// Offsets of each parameter group inside the flat vector. Order: A_x, B_w,
/// B_u, C_z, D_zu, C_y, D_yw, D_yu, [dA_lower, dB_upper, d_d], [net], x0.
struct ParamLayout {
  std::size_t a_x, b_w, b_u, c_z, d_zu, c_y, d_yw, d_yu;
  std::size_t da, db, dd;  // equal to `net` in affine mode (empty ranges)
  std::size_t net, x0, total;
  std::size_t plant_end;  // end of theta_G (plant blocks + factors)

  explicit ParamLayout(const ModelStructure& s) {
    const std::size_t nx = s.n_x, nw = s.n_w(), nu = s.n_u, ny = s.n_y;
    std::size_t o = 0;
    auto take = [&o](std::size_t n) {
      const std::size_t at = o;
      o += n;
      return at;
    };
    a_x = take(nx * nx);
    b_w = take(nx * nw);
    b_u = take(nx * nu);
    c_z = take(nw * nx);
    d_zu = take(nw * nu);
    c_y = take(ny * nx);
    d_yw = take(ny * nw);
    d_yu = take(ny * nu);
    const bool rat = s.mode == Dependency::rational;
    da = take(rat ? WellPosedFactors::lower_count(nw) : 0);
    db = take(rat ? WellPosedFactors::upper_count(nw) : 0);
    dd = take(rat ? nw : 0);
    plant_end = o;
    net = take(s.scheduling == SchedulingKind::network ? SchedulingNet(s.net_shape()).param_count() : 0);
    x0 = take(nx);
    total = o;
  }
  std::size_t factor_count() const noexcept { return net - da; }
};

namespace detail {
inline void put(std::vector<double>& theta, std::size_t off, const Mat& m) {
  std::copy(m.values().begin(), m.values().end(), theta.begin() + static_cast<std::ptrdiff_t>(off));
}
inline Mat get(std::span<const double> theta, std::size_t off, std::size_t r, std::size_t c) {
  return Mat(r, c, std::vector<double>(theta.begin() + off, theta.begin() + off + r * c));
}
}  // namespace detail

inline std::vector<double> pack(const Model& m) {
  const ParamLayout L(m.structure);
  std::vector<double> t(L.total, 0.0);
  const auto& p = m.plant;
  detail::put(t, L.a_x, p.a_x);
  detail::put(t, L.b_w, p.b_w);
  detail::put(t, L.b_u, p.b_u);
  detail::put(t, L.c_z, p.c_z);
  detail::put(t, L.d_zu, p.d_zu);
  detail::put(t, L.c_y, p.c_y);
  detail::put(t, L.d_yw, p.d_yw);
  detail::put(t, L.d_yu, p.d_yu);
  if (m.structure.mode == Dependency::rational) {
    std::copy(m.factors->da_lower.begin(), m.factors->da_lower.end(), t.begin() + L.da);
    std::copy(m.factors->db_upper.begin(), m.factors->db_upper.end(), t.begin() + L.db);
    std::copy(m.factors->d_d.begin(), m.factors->d_d.end(), t.begin() + L.dd);
  }
  if (m.structure.scheduling == SchedulingKind::network)
    std::copy(m.net.params().begin(), m.net.params().end(), t.begin() + L.net);
  std::copy(m.x0.begin(), m.x0.end(), t.begin() + L.x0);
  return t;
}

inline WellPosedFactors factors_from(const ModelStructure& s, std::span<const double> theta, const ParamLayout& L) {
  const std::size_t nw = s.n_w();
  WellPosedFactors f;
  f.n_w = nw;
  f.epsilon = s.epsilon;
  f.da_lower.assign(theta.begin() + L.da, theta.begin() + L.db);
  f.db_upper.assign(theta.begin() + L.db, theta.begin() + L.dd);
  f.d_d.assign(theta.begin() + L.dd, theta.begin() + L.dd + nw);
  return f;
}

/// Rebuilds a model from a flat vector. Rational mode recomputes D_zw.
inline Model unpack(const ModelStructure& s, std::span<const double> theta,
                    std::optional<DataScalers> scalers = std::nullopt) {
  const ParamLayout L(s);
  if (theta.size() != L.total) throw DimensionMismatch("unpack: parameter vector has wrong length");
  const std::size_t nx = s.n_x, nw = s.n_w(), nu = s.n_u, ny = s.n_y;
  Model m;
  m.structure = s;
  m.plant = {detail::get(theta, L.a_x, nx, nx), detail::get(theta, L.b_w, nx, nw), detail::get(theta, L.b_u, nx, nu),
             detail::get(theta, L.c_z, nw, nx), Mat(nw, nw),                         detail::get(theta, L.d_zu, nw, nu),
             detail::get(theta, L.c_y, ny, nx), detail::get(theta, L.d_yw, ny, nw), detail::get(theta, L.d_yu, ny, nu),
             s.delta};
  if (s.mode == Dependency::rational) {
    m.factors = factors_from(s, theta, L);
    m.plant.d_zw = build_Dzw(*m.factors);
  }
  if (s.scheduling == SchedulingKind::network) {
    m.net = SchedulingNet(s.net_shape());
    std::copy(theta.begin() + L.net, theta.begin() + L.x0, m.net.params().begin());
  }
  m.x0.assign(theta.begin() + L.x0, theta.begin() + L.total);
  m.scalers = std::move(scalers);
  return m;
}

/// Simulated output in the dataset's units, starting from the model's x0.
inline Trajectory simulate_model(const Model& m, const Dataset& data, std::span<const double> x0) {
  const auto& s = m.structure;
  if (data.n_u() != s.n_u || data.n_y() != s.n_y || data.n_d() != s.n_d)
    throw DimensionMismatch("model expects (u=" + std::to_string(s.n_u) + ", d=" + std::to_string(s.n_d) +
                            ", y=" + std::to_string(s.n_y) + ") channels, dataset has (u=" +
                            std::to_string(data.n_u()) + ", d=" + std::to_string(data.n_d()) +
                            ", y=" + std::to_string(data.n_y()) + ")");
  const Mat u = m.scalers ? scale_columns(data.u, m.scalers->u_mean, m.scalers->u_std) : data.u;
  Trajectory t = s.scheduling == SchedulingKind::network
                     ? simulate(m.plant, SchedulingSource::self_scheduled(m.net), u, data.d, x0)
                     : simulate(m.plant, SchedulingSource::exogenous(data.d), u, data.d, x0);
  if (m.scalers) t.y = unscale_columns(t.y, m.scalers->y_mean, m.scalers->y_std);
  return t;
}
inline Trajectory simulate_model(const Model& m, const Dataset& data) { return simulate_model(m, data, m.x0); }

// ---------------------------------------------------------------------------
// Model document (JSON). Reals are written in shortest round-trip form, so
// read(write(m)) reproduces every value exactly.

namespace io {

using Json = nlohmann::ordered_json;

inline Json mat_to_json(const Mat& m) {
  Json rows = Json::array();
  for (std::size_t i = 0; i < m.rows(); ++i) {
    Json r = Json::array();
    for (std::size_t j = 0; j < m.cols(); ++j) r.push_back(m(i, j));
    rows.push_back(std::move(r));
  }
  return rows;
}

inline Mat mat_from_json(const Json& j, std::size_t rows, std::size_t cols, const std::string& name) {
  if (!j.is_array() || j.size() != rows) throw SchemaError("model document: block '" + name + "' has wrong row count");
  std::vector<double> v;
  v.reserve(rows * cols);
  for (const auto& r : j) {
    if (!r.is_array() || r.size() != cols)
      throw SchemaError("model document: block '" + name + "' has wrong column count");
    for (const auto& x : r) v.push_back(x.get<double>());
  }
  return Mat(rows, cols, std::move(v));
}

inline Json to_json(const Model& m) {
  const auto& s = m.structure;
  Json doc;
  doc["format"] = "lpvlfr-model";
  doc["version"] = 1;
  doc["mode"] = to_string(s.mode);
  doc["dims"] = {{"n_x", s.n_x}, {"n_u", s.n_u}, {"n_y", s.n_y}, {"n_d", s.n_d}, {"n_w", s.n_w()}, {"n_p", s.n_p()}};
  doc["eta"] = s.delta.eta;
  const auto& p = m.plant;
  doc["blocks"] = {{"A_x", mat_to_json(p.a_x)},   {"B_w", mat_to_json(p.b_w)},   {"B_u", mat_to_json(p.b_u)},
                   {"C_z", mat_to_json(p.c_z)},   {"D_zw", mat_to_json(p.d_zw)}, {"D_zu", mat_to_json(p.d_zu)},
                   {"C_y", mat_to_json(p.c_y)},   {"D_yw", mat_to_json(p.d_yw)}, {"D_yu", mat_to_json(p.d_yu)}};
  if (s.mode == Dependency::rational) {
    const auto& f = *m.factors;
    doc["wellposed_factors"] = {
        {"epsilon", f.epsilon}, {"dA_lower", f.da_lower}, {"dB_upper", f.db_upper}, {"d_d", f.d_d}};
  }
  doc["scheduling"] = to_string(s.scheduling);
  if (s.scheduling == SchedulingKind::network) {
    Json layers = Json::array();
    for (std::size_t l = 0; l < m.net.hidden_layers(); ++l) {
      const Mat w = m.net.hidden_weight(l);
      layers.push_back({{"name", "hidden" + std::to_string(l)},
                        {"shape", {w.rows(), w.cols()}},
                        {"weights", mat_to_json(w)},
                        {"bias", m.net.hidden_bias(l)},
                        {"activation", "tanh"}});
    }
    if (m.net.hidden_layers() > 0) {
      const Mat h = m.net.head();
      layers.push_back({{"name", "head"},
                        {"shape", {h.rows(), h.cols()}},
                        {"weights", mat_to_json(h)},
                        {"bias", Json::array()},
                        {"activation", "linear"}});
    }
    const Mat b = m.net.bypass();
    layers.push_back({{"name", "bypass"},
                      {"shape", {b.rows(), b.cols()}},
                      {"weights", mat_to_json(b)},
                      {"bias", m.net.bias()},
                      {"activation", "tanh"}});
    doc["scheduling_net"] = {{"n_x", s.n_x}, {"n_u", s.n_u}, {"n_d", s.n_d}, {"n_p", s.n_p()},
                             {"hidden", s.hidden}, {"layers", std::move(layers)}};
  } else {
    doc["scheduling_net"] = nullptr;
  }
  doc["x0"] = m.x0;
  if (m.scalers) {
    doc["data_scalers"] = {{"u_mean", m.scalers->u_mean},
                           {"u_std", m.scalers->u_std},
                           {"y_mean", m.scalers->y_mean},
                           {"y_std", m.scalers->y_std}};
  } else {
    doc["data_scalers"] = nullptr;
  }
  return doc;
}

inline Model from_json(const Json& doc) {
  if (doc.value("format", std::string()) != "lpvlfr-model") throw SchemaError("not an lpvlfr model document");
  ModelStructure s;
  s.mode = parse_dependency(doc.at("mode").get<std::string>());
  const auto& dims = doc.at("dims");
  s.n_x = dims.at("n_x").get<std::size_t>();
  s.n_u = dims.at("n_u").get<std::size_t>();
  s.n_y = dims.at("n_y").get<std::size_t>();
  s.n_d = dims.at("n_d").get<std::size_t>();
  s.delta = DeltaStructure(doc.at("eta").get<std::vector<std::size_t>>());
  if (dims.contains("n_w") && dims["n_w"].get<std::size_t>() != s.n_w())
    throw SchemaError("model document: n_w does not equal sum(eta)");
  const std::string kind = doc.value("scheduling", std::string("network"));
  if (kind != "network" && kind != "exogenous") throw SchemaError("model document: unknown scheduling '" + kind + "'");
  s.scheduling = kind == "network" ? SchedulingKind::network : SchedulingKind::exogenous;
  const std::size_t nx = s.n_x, nw = s.n_w(), nu = s.n_u, ny = s.n_y;

  Model m;
  const auto& b = doc.at("blocks");
  m.plant = {mat_from_json(b.at("A_x"), nx, nx, "A_x"),   mat_from_json(b.at("B_w"), nx, nw, "B_w"),
             mat_from_json(b.at("B_u"), nx, nu, "B_u"),   mat_from_json(b.at("C_z"), nw, nx, "C_z"),
             mat_from_json(b.at("D_zw"), nw, nw, "D_zw"), mat_from_json(b.at("D_zu"), nw, nu, "D_zu"),
             mat_from_json(b.at("C_y"), ny, nx, "C_y"),   mat_from_json(b.at("D_yw"), ny, nw, "D_yw"),
             mat_from_json(b.at("D_yu"), ny, nu, "D_yu"), s.delta};
  if (s.mode == Dependency::rational) {
    const auto& f = doc.at("wellposed_factors");
    WellPosedFactors wf;
    wf.n_w = nw;
    wf.epsilon = f.at("epsilon").get<double>();
    wf.da_lower = f.at("dA_lower").get<std::vector<double>>();
    wf.db_upper = f.at("dB_upper").get<std::vector<double>>();
    wf.d_d = f.at("d_d").get<std::vector<double>>();
    wf.validate();
    s.epsilon = wf.epsilon;
    m.factors = std::move(wf);
  } else if (doc.contains("wellposed_factors") && !doc["wellposed_factors"].is_null()) {
    throw SchemaError("model document: affine model carries wellposed_factors");
  }
  if (s.scheduling == SchedulingKind::network) {
    const auto& net = doc.at("scheduling_net");
    s.hidden = net.at("hidden").get<std::vector<std::size_t>>();
    m.net = SchedulingNet(s.net_shape());
    const auto& layers = net.at("layers");
    const std::size_t expected = s.hidden.size() + (s.hidden.empty() ? 1 : 2);
    if (!layers.is_array() || layers.size() != expected) throw SchemaError("model document: wrong number of net layers");
    std::size_t in = s.n_x + s.n_u + s.n_d;
    for (std::size_t l = 0; l < s.hidden.size(); ++l) {
      const auto& rec = layers[l];
      m.net.set_hidden(l, mat_from_json(rec.at("weights"), s.hidden[l], in, "hidden"),
                       rec.at("bias").get<std::vector<double>>());
      in = s.hidden[l];
    }
    if (!s.hidden.empty()) m.net.set_head(mat_from_json(layers[s.hidden.size()].at("weights"), s.n_p(), in, "head"));
    const auto& by = layers.back();
    m.net.set_bypass(mat_from_json(by.at("weights"), s.n_p(), s.n_x + s.n_u + s.n_d, "bypass"));
    m.net.set_bias(by.at("bias").get<std::vector<double>>());
  }
  m.x0 = doc.at("x0").get<std::vector<double>>();
  if (m.x0.size() != nx) throw SchemaError("model document: x0 has wrong length");
  if (doc.contains("data_scalers") && !doc["data_scalers"].is_null()) {
    const auto& sc = doc["data_scalers"];
    m.scalers = DataScalers{sc.at("u_mean").get<std::vector<double>>(), sc.at("u_std").get<std::vector<double>>(),
                            sc.at("y_mean").get<std::vector<double>>(), sc.at("y_std").get<std::vector<double>>()};
  }
  s.validate();
  m.structure = std::move(s);
  m.plant.validate();
  return m;
}

inline std::string dump(const Model& m) { return to_json(m).dump(2) + "\n"; }

inline void write_model(const Model& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << dump(m);
}

inline Model read_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  try {
    return from_json(Json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("model document '" + path.string() + "': " + e.what());
  }
}

}  // namespace io
}  // namespace lpvlfr
