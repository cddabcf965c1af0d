#include "saemx/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string_view>
#include <system_error>

#include <json.hpp>

#include "saemx/errors.hpp"
#include "saemx/model.hpp"

namespace saemx {

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw ConfigError("read failed for " + path);
  return ss.str();
}

namespace {

using nlohmann::json;

std::string trim(std::string_view s) {
  size_t b = 0, e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    const size_t pos = line.find(',', start);
    if (pos == std::string::npos) {
      out.push_back(trim(std::string_view(line).substr(start)));
      break;
    }
    out.push_back(trim(std::string_view(line).substr(start, pos - start)));
    start = pos + 1;
  }
  return out;
}

double parse_double_field(const std::string& field, const std::string& where) {
  const char* b = field.data();
  const char* e = b + field.size();
  if (b != e && *b == '+') ++b;
  double v = 0.0;
  const auto r = std::from_chars(b, e, v);
  if (r.ec != std::errc{} || r.ptr != e || field.empty())
    throw ParseError(where + ": not a number: \"" + field + "\"");
  return v;
}

int parse_int_field(const std::string& field, const std::string& where) {
  const char* b = field.data();
  const char* e = b + field.size();
  if (b != e && *b == '+') ++b;
  int v = 0;
  const auto r = std::from_chars(b, e, v);
  if (r.ec != std::errc{} || r.ptr != e || field.empty())
    throw ParseError(where + ": not an integer: \"" + field + "\"");
  return v;
}

struct ObsRow {
  double time, dv;
  int line;
};

struct UnitBuilder {
  DoseRecord dose;
  bool dose_set = false;
  std::vector<ObsRow> obs;
};

struct SubjectBuilder {
  std::string id;
  std::map<int, UnitBuilder> units;
};

// ----------------------------------------------------------- json helpers

const json* find_field(const json& j, const char* key) {
  const auto it = j.find(key);
  if (it == j.end() || it->is_null()) return nullptr;
  return &*it;
}

const json& require_field(const json& j, const char* key, const std::string& ctx) {
  const json* f = find_field(j, key);
  if (f == nullptr) throw ConfigError(ctx + ": missing field \"" + key + "\"");
  return *f;
}

void require_object(const json& j, const std::string& ctx) {
  if (!j.is_object()) throw ConfigError(ctx + ": expected an object");
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& ctx) {
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || item.key() == a;
    if (!ok) throw ConfigError(ctx + ": unrecognized field \"" + item.key() + "\"");
  }
}

double as_number(const json& j, const std::string& ctx) {
  if (!j.is_number()) throw ConfigError(ctx + ": expected a number");
  return j.get<double>();
}

int as_int(const json& j, const std::string& ctx) {
  if (!j.is_number_integer()) throw ConfigError(ctx + ": expected an integer");
  return j.get<int>();
}

std::uint64_t as_seed(const json& j, const std::string& ctx) {
  if (j.is_number_unsigned()) return j.get<std::uint64_t>();
  if (j.is_number_integer() && j.get<long long>() >= 0)
    return static_cast<std::uint64_t>(j.get<long long>());
  throw ConfigError(ctx + ": expected a non-negative integer");
}

bool as_bool(const json& j, const std::string& ctx) {
  if (!j.is_boolean()) throw ConfigError(ctx + ": expected true or false");
  return j.get<bool>();
}

std::string as_string(const json& j, const std::string& ctx) {
  if (!j.is_string()) throw ConfigError(ctx + ": expected a string");
  return j.get<std::string>();
}

Eigen::VectorXd as_vector(const json& j, const std::string& ctx) {
  if (!j.is_array() || j.empty()) throw ConfigError(ctx + ": expected a non-empty array of numbers");
  Eigen::VectorXd v(j.size());
  for (size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = as_number(j[i], ctx);
  return v;
}

std::vector<double> as_std_vector(const json& j, const std::string& ctx) {
  const Eigen::VectorXd v = as_vector(j, ctx);
  return std::vector<double>(v.data(), v.data() + v.size());
}

Eigen::MatrixXd as_matrix(const json& j, const std::string& ctx) {
  if (!j.is_array() || j.empty() || !j[0].is_array())
    throw ConfigError(ctx + ": expected an array of arrays");
  const size_t cols = j[0].size();
  Eigen::MatrixXd m(j.size(), cols);
  for (size_t r = 0; r < j.size(); ++r) {
    if (!j[r].is_array() || j[r].size() != cols)
      throw ConfigError(ctx + ": rows must all have " + std::to_string(cols) + " entries");
    for (size_t c = 0; c < cols; ++c)
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = as_number(j[r][c], ctx);
  }
  return m;
}

// covariance spec: flat array = diagonal entries, nested arrays = full matrix
Eigen::MatrixXd as_covariance(const json& j, const std::string& ctx) {
  if (j.is_array() && !j.empty() && j[0].is_array()) {
    const Eigen::MatrixXd m = as_matrix(j, ctx);
    if (m.rows() != m.cols()) throw ConfigError(ctx + ": matrix must be square");
    return m;
  }
  const Eigen::VectorXd d = as_vector(j, ctx);
  return d.asDiagonal();
}

json vector_json(const Eigen::VectorXd& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

json matrix_json(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(row);
  }
  return rows;
}

double number_or(const json& j, const char* key, double fallback) {
  const json* f = find_field(j, key);
  return f == nullptr ? fallback : f->get<double>();
}

ThetaParams parse_theta(const json& j, CovStructure structure, int K, const std::string& ctx) {
  require_object(j, ctx);
  check_keys(j, {"mu", "beta", "omega", "psi", "sigma2"}, ctx);
  ThetaParams theta;
  theta.structure = structure;
  theta.mu = as_vector(require_field(j, "mu", ctx), ctx + ".mu");
  const int p = theta.p();
  if (const json* b = find_field(j, "beta")) {
    theta.beta = as_matrix(*b, ctx + ".beta");
    if (theta.beta.rows() != K || theta.beta.cols() != p)
      throw ConfigError(ctx + ".beta: expected " + std::to_string(K) + " rows of " +
                        std::to_string(p) + " entries (first row all zero)");
  } else {
    theta.beta = Eigen::MatrixXd::Zero(K, p);
  }
  theta.omega = as_covariance(require_field(j, "omega", ctx), ctx + ".omega");
  theta.psi = as_covariance(require_field(j, "psi", ctx), ctx + ".psi");
  theta.sigma2 = as_number(require_field(j, "sigma2", ctx), ctx + ".sigma2");
  try {
    theta.validate();
  } catch (const std::exception& e) {
    throw ConfigError(ctx + ": " + e.what());
  }
  return theta;
}

json theta_json(const ThetaParams& theta) {
  json j;
  j["mu"] = vector_json(theta.mu);
  j["beta"] = matrix_json(theta.beta);
  j["omega"] = matrix_json(theta.omega);
  j["psi"] = matrix_json(theta.psi);
  j["sigma2"] = theta.sigma2;
  return j;
}

json kernels_json(const KernelConfig& k) {
  json j;
  j["rho_init"] = k.rho_init;
  j["target_acceptance"] = k.target_acceptance;
  j["adapt_rate"] = k.adapt_rate;
  j["adapt_during_burnin"] = k.adapt_during_burnin;
  j["sweeps"] = {{"prior", k.sweeps_prior}, {"rw_full", k.sweeps_rw_full}, {"rw_component", k.sweeps_rw_component}};
  return j;
}

KernelConfig parse_kernels(const json& j, const std::string& ctx) {
  require_object(j, ctx);
  check_keys(j, {"rho_init", "target_acceptance", "adapt_rate", "adapt_during_burnin", "sweeps"}, ctx);
  KernelConfig k;
  if (const json* f = find_field(j, "rho_init")) k.rho_init = as_number(*f, ctx + ".rho_init");
  if (const json* f = find_field(j, "target_acceptance"))
    k.target_acceptance = as_number(*f, ctx + ".target_acceptance");
  if (const json* f = find_field(j, "adapt_rate")) k.adapt_rate = as_number(*f, ctx + ".adapt_rate");
  if (const json* f = find_field(j, "adapt_during_burnin"))
    k.adapt_during_burnin = as_bool(*f, ctx + ".adapt_during_burnin");
  if (const json* s = find_field(j, "sweeps")) {
    require_object(*s, ctx + ".sweeps");
    check_keys(*s, {"prior", "rw_full", "rw_component"}, ctx + ".sweeps");
    if (const json* f = find_field(*s, "prior")) k.sweeps_prior = as_int(*f, ctx + ".sweeps.prior");
    if (const json* f = find_field(*s, "rw_full")) k.sweeps_rw_full = as_int(*f, ctx + ".sweeps.rw_full");
    if (const json* f = find_field(*s, "rw_component"))
      k.sweeps_rw_component = as_int(*f, ctx + ".sweeps.rw_component");
  }
  try {
    k.validate();
  } catch (const std::exception& e) {
    throw ConfigError(ctx + ": " + e.what());
  }
  return k;
}

json inference_json(const InferenceConfig& c) {
  json j;
  j["loglik_samples"] = c.loglik_samples;
  j["instrumental_inflation"] = c.instrumental_inflation;
  j["posterior_sweeps"] = c.posterior_sweeps;
  j["posterior_burnin"] = c.posterior_burnin;
  return j;
}

InferenceConfig parse_inference(const json& j, const std::string& ctx) {
  require_object(j, ctx);
  check_keys(j, {"loglik_samples", "instrumental_inflation", "posterior_sweeps", "posterior_burnin"}, ctx);
  InferenceConfig c;
  if (const json* f = find_field(j, "loglik_samples")) c.loglik_samples = as_int(*f, ctx + ".loglik_samples");
  if (const json* f = find_field(j, "instrumental_inflation"))
    c.instrumental_inflation = as_number(*f, ctx + ".instrumental_inflation");
  if (const json* f = find_field(j, "posterior_sweeps"))
    c.posterior_sweeps = as_int(*f, ctx + ".posterior_sweeps");
  if (const json* f = find_field(j, "posterior_burnin"))
    c.posterior_burnin = as_int(*f, ctx + ".posterior_burnin");
  try {
    c.validate();
  } catch (const std::exception& e) {
    throw ConfigError(ctx + ": " + e.what());
  }
  return c;
}

}  // namespace

// ------------------------------------------------------------------ basics

std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[40];
  const auto r = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, r.ptr);
}

void atomic_write_text(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot open " + tmp + " for writing");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw ConfigError("write failed for " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw ConfigError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

// ---------------------------------------------------------------- datasets

Dataset dataset_from_csv(const std::string& content, const std::string& origin) {
  std::vector<std::string> lines;
  {
    size_t start = 0;
    while (start <= content.size()) {
      const size_t pos = content.find('\n', start);
      if (pos == std::string::npos) {
        lines.push_back(content.substr(start));
        break;
      }
      lines.push_back(content.substr(start, pos - start));
      start = pos + 1;
    }
  }

  auto where = [&origin](int line_no) { return origin + ":" + std::to_string(line_no); };

  int header_line = 0;
  std::vector<std::string> header;
  for (size_t i = 0; i < lines.size(); ++i) {
    if (!trim(lines[i]).empty()) {
      header = split_fields(lines[i]);
      header_line = static_cast<int>(i) + 1;
      break;
    }
  }
  if (header_line == 0) throw ParseError(origin + ": empty file");

  std::map<std::string, int> col;
  for (size_t c = 0; c < header.size(); ++c) {
    if (col.count(header[c])) throw ParseError(where(header_line) + ": duplicate column \"" + header[c] + "\"");
    col[header[c]] = static_cast<int>(c);
  }
  for (const auto& [name, idx] : col) {
    (void)idx;
    if (name != "subject_id" && name != "unit" && name != "time" && name != "dv" && name != "dose" &&
        name != "tau")
      throw ParseError(where(header_line) + ": unrecognized column \"" + name + "\"");
  }
  for (const char* required : {"subject_id", "unit", "time", "dv", "dose"})
    if (!col.count(required))
      throw ParseError(where(header_line) + ": missing required column \"" + std::string(required) + "\"");
  const bool has_tau = col.count("tau") > 0;

  std::vector<SubjectBuilder> builders;
  std::map<std::string, size_t> subject_index;

  for (size_t i = static_cast<size_t>(header_line); i < lines.size(); ++i) {
    const int line_no = static_cast<int>(i) + 1;
    if (trim(lines[i]).empty()) continue;
    const std::vector<std::string> fields = split_fields(lines[i]);
    if (fields.size() != header.size())
      throw ParseError(where(line_no) + ": expected " + std::to_string(header.size()) + " fields, got " +
                       std::to_string(fields.size()));

    const std::string sid = fields[static_cast<size_t>(col["subject_id"])];
    if (sid.empty()) throw ParseError(where(line_no) + ": empty subject_id");
    const int unit = parse_int_field(fields[static_cast<size_t>(col["unit"])], where(line_no));
    if (unit < 1) throw ParseError(where(line_no) + ": unit labels are 1-based, got " + std::to_string(unit));
    const double time = parse_double_field(fields[static_cast<size_t>(col["time"])], where(line_no));
    const double dv = parse_double_field(fields[static_cast<size_t>(col["dv"])], where(line_no));
    const double dose = parse_double_field(fields[static_cast<size_t>(col["dose"])], where(line_no));
    if (!std::isfinite(time) || time < 0) throw ParseError(where(line_no) + ": invalid time");
    if (!std::isfinite(dv)) throw ParseError(where(line_no) + ": invalid dv");
    if (!std::isfinite(dose) || dose <= 0) throw ParseError(where(line_no) + ": dose must be positive");
    std::optional<double> tau;
    if (has_tau) {
      const std::string& tf = fields[static_cast<size_t>(col["tau"])];
      if (!tf.empty()) {
        const double t = parse_double_field(tf, where(line_no));
        if (!std::isfinite(t) || t <= 0) throw ParseError(where(line_no) + ": tau must be positive");
        tau = t;
      }
    }

    auto [it, inserted] = subject_index.try_emplace(sid, builders.size());
    if (inserted) builders.push_back(SubjectBuilder{sid, {}});
    UnitBuilder& ub = builders[it->second].units[unit];
    if (!ub.dose_set) {
      ub.dose = DoseRecord{dose, tau};
      ub.dose_set = true;
    } else if (ub.dose.amount != dose || ub.dose.tau != tau) {
      throw ParseError(where(line_no) + ": inconsistent dose record within subject " + sid + " unit " +
                       std::to_string(unit));
    }
    ub.obs.push_back(ObsRow{time, dv, line_no});
  }

  Dataset data;
  for (SubjectBuilder& sb : builders) {
    SubjectData subject;
    subject.id = sb.id;
    for (auto& [label, ub] : sb.units) {
      std::stable_sort(ub.obs.begin(), ub.obs.end(),
                       [](const ObsRow& a, const ObsRow& b) { return a.time < b.time; });
      for (size_t r = 1; r < ub.obs.size(); ++r)
        if (ub.obs[r].time == ub.obs[r - 1].time)
          throw ParseError(where(ub.obs[r].line) + ": duplicate time " + format_double(ub.obs[r].time) +
                           " for subject " + sb.id + " unit " + std::to_string(label));
      UnitData unit;
      unit.unit = label;
      unit.dose = ub.dose;
      unit.times.reserve(ub.obs.size());
      unit.dv.reserve(ub.obs.size());
      for (const ObsRow& row : ub.obs) {
        unit.times.push_back(row.time);
        unit.dv.push_back(row.dv);
      }
      subject.units.push_back(std::move(unit));
    }
    data.subjects.push_back(std::move(subject));
  }

  try {
    data.validate();
  } catch (const std::exception& e) {
    throw ParseError(origin + ": " + e.what());
  }
  return data;
}

Dataset read_dataset(const std::string& path) { return dataset_from_csv(read_text_file(path), path); }

std::string dataset_to_csv(const Dataset& data) {
  std::string out = "subject_id,unit,time,dv,dose,tau\n";
  for (const SubjectData& subject : data.subjects) {
    for (const UnitData& unit : subject.units) {
      for (size_t r = 0; r < unit.times.size(); ++r) {
        out += subject.id;
        out += ',';
        out += std::to_string(unit.unit);
        out += ',';
        out += format_double(unit.times[r]);
        out += ',';
        out += format_double(unit.dv[r]);
        out += ',';
        out += format_double(unit.dose.amount);
        out += ',';
        if (unit.dose.tau) out += format_double(*unit.dose.tau);
        out += '\n';
      }
    }
  }
  return out;
}

void write_dataset(const Dataset& data, const std::string& path) {
  atomic_write_text(path, dataset_to_csv(data));
}

// --------------------------------------------------------------- fit config

FitConfig FitConfig::from_json_text(const std::string& text, const std::string& origin) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError(origin + ": " + e.what());
  }
  require_object(j, origin);
  check_keys(j, {"model", "saem", "kernels", "init", "constraints", "inference", "tests", "design", "replicate"},
             origin);

  FitConfig cfg;

  const json& m = require_field(j, "model", origin);
  require_object(m, origin + ": \"model\"");
  check_keys(m, {"structural", "error", "covariance"}, origin + ": \"model\"");
  cfg.structural_id = as_string(require_field(m, "structural", origin + ": \"model\""), origin + ": \"model.structural\"");
  if (const json* f = find_field(m, "error")) cfg.error_name = as_string(*f, origin + ": \"model.error\"");
  if (const json* f = find_field(m, "covariance")) {
    try {
      cfg.structure = cov_structure_from_name(as_string(*f, origin + ": \"model.covariance\""));
    } catch (const std::exception& e) {
      throw ConfigError(origin + ": \"model.covariance\": " + e.what());
    }
  }
  try {
    structural_registry(cfg.structural_id);
    ErrorModel::from_name(cfg.error_name);
  } catch (const std::exception& e) {
    throw ConfigError(origin + ": " + e.what());
  }

  if (const json* s = find_field(j, "saem")) {
    require_object(*s, origin + ": \"saem\"");
    check_keys(*s, {"iterations", "burn_in", "chains", "anneal_decay", "seed"}, origin + ": \"saem\"");
    if (const json* f = find_field(*s, "iterations")) cfg.n_iterations = as_int(*f, origin + ": \"saem.iterations\"");
    if (const json* f = find_field(*s, "burn_in")) cfg.burn_in = as_int(*f, origin + ": \"saem.burn_in\"");
    if (const json* f = find_field(*s, "chains")) cfg.n_chains = as_int(*f, origin + ": \"saem.chains\"");
    if (const json* f = find_field(*s, "anneal_decay"))
      cfg.anneal_decay = as_number(*f, origin + ": \"saem.anneal_decay\"");
    if (const json* f = find_field(*s, "seed")) cfg.seed = as_seed(*f, origin + ": \"saem.seed\"");
  }
  if (cfg.n_iterations < 1) throw ConfigError(origin + ": \"saem.iterations\" must be positive");
  if (cfg.burn_in < 0 || cfg.burn_in >= cfg.n_iterations)
    throw ConfigError(origin + ": \"saem.burn_in\" must lie in [0, iterations)");
  if (!(cfg.anneal_decay >= 0.0 && cfg.anneal_decay < 1.0))
    throw ConfigError(origin + ": \"saem.anneal_decay\" must lie in [0, 1)");
  if (cfg.n_chains < 0) throw ConfigError(origin + ": \"saem.chains\" must be >= 0");

  if (const json* k = find_field(j, "kernels")) cfg.kernels = parse_kernels(*k, origin + ": \"kernels\"");

  if (const json* init = find_field(j, "init")) {
    require_object(*init, origin + ": \"init\"");
    check_keys(*init, {"mu", "beta", "omega", "psi", "sigma2"}, origin + ": \"init\"");
    if (const json* f = find_field(*init, "mu")) cfg.init.mu = as_vector(*f, origin + ": \"init.mu\"");
    if (const json* f = find_field(*init, "beta")) cfg.init.beta = as_matrix(*f, origin + ": \"init.beta\"");
    if (const json* f = find_field(*init, "omega")) cfg.init.omega = as_covariance(*f, origin + ": \"init.omega\"");
    if (const json* f = find_field(*init, "psi")) cfg.init.psi = as_covariance(*f, origin + ": \"init.psi\"");
    if (const json* f = find_field(*init, "sigma2")) {
      cfg.init.sigma2 = as_number(*f, origin + ": \"init.sigma2\"");
      if (!(*cfg.init.sigma2 > 0)) throw ConfigError(origin + ": \"init.sigma2\" must be positive");
    }
  }

  if (const json* c = find_field(j, "constraints")) {
    require_object(*c, origin + ": \"constraints\"");
    check_keys(*c, {"beta_zero"}, origin + ": \"constraints\"");
    if (const json* f = find_field(*c, "beta_zero")) {
      if (!f->is_array()) throw ConfigError(origin + ": \"constraints.beta_zero\" must be an array of names");
      for (const json& e : *f) cfg.beta_zero.push_back(as_string(e, origin + ": \"constraints.beta_zero\""));
    }
  }

  if (const json* inf = find_field(j, "inference")) cfg.inference = parse_inference(*inf, origin + ": \"inference\"");

  if (const json* t = find_field(j, "tests")) {
    require_object(*t, origin + ": \"tests\"");
    check_keys(*t, {"run", "component", "alpha"}, origin + ": \"tests\"");
    if (const json* f = find_field(*t, "run")) {
      if (!f->is_array()) throw ConfigError(origin + ": \"tests.run\" must be an array");
      for (const json& e : *f) {
        const std::string name = as_string(e, origin + ": \"tests.run\"");
        if (name != "wald" && name != "lrt")
          throw ConfigError(origin + ": \"tests.run\": unknown test \"" + name + "\" (use \"wald\" or \"lrt\")");
        cfg.tests.push_back(name);
      }
    }
    if (const json* f = find_field(*t, "component"))
      cfg.test_component = as_string(*f, origin + ": \"tests.component\"");
    if (const json* f = find_field(*t, "alpha")) {
      cfg.alpha = as_number(*f, origin + ": \"tests.alpha\"");
      if (!(cfg.alpha > 0 && cfg.alpha < 1)) throw ConfigError(origin + ": \"tests.alpha\" must lie in (0, 1)");
    }
    if (!cfg.tests.empty() && cfg.test_component.empty())
      throw ConfigError(origin + ": \"tests.component\" is required when tests are requested");
  }

  if (const json* d = find_field(j, "design")) {
    require_object(*d, origin + ": \"design\"");
    check_keys(*d, {"n_subjects", "n_units", "times", "dose", "tau", "theta_true"}, origin + ": \"design\"");
    Design design;
    design.n_subjects = as_int(require_field(*d, "n_subjects", origin + ": \"design\""), origin + ": \"design.n_subjects\"");
    if (design.n_subjects < 1) throw ConfigError(origin + ": \"design.n_subjects\" must be positive");
    if (const json* f = find_field(*d, "n_units")) design.n_units = as_int(*f, origin + ": \"design.n_units\"");
    if (design.n_units < 2) throw ConfigError(origin + ": \"design.n_units\" must be at least 2");

    const json& times = require_field(*d, "times", origin + ": \"design\"");
    if (!times.is_array() || times.empty()) throw ConfigError(origin + ": \"design.times\" must be a non-empty array");
    if (times[0].is_array()) {
      for (size_t g = 0; g < times.size(); ++g)
        design.times.push_back(as_std_vector(times[g], origin + ": \"design.times\""));
    } else {
      design.times.push_back(as_std_vector(times, origin + ": \"design.times\""));
    }

    const json& dose = require_field(*d, "dose", origin + ": \"design\"");
    if (dose.is_array()) {
      design.dose = as_std_vector(dose, origin + ": \"design.dose\"");
    } else {
      design.dose.push_back(as_number(dose, origin + ": \"design.dose\""));
    }

    if (const json* f = find_field(*d, "tau")) {
      const double tau = as_number(*f, origin + ": \"design.tau\"");
      if (!(tau > 0)) throw ConfigError(origin + ": \"design.tau\" must be positive");
      design.tau = tau;
    }

    if (const json* f = find_field(*d, "theta_true"))
      design.theta_true = parse_theta(*f, cfg.structure, design.n_units, origin + ": \"design.theta_true\"");

    cfg.design = std::move(design);
  }

  if (const json* r = find_field(j, "replicate")) {
    require_object(*r, origin + ": \"replicate\"");
    check_keys(*r, {"replicates", "workers", "max_failure_rate"}, origin + ": \"replicate\"");
    if (const json* f = find_field(*r, "replicates")) {
      cfg.replicates = as_int(*f, origin + ": \"replicate.replicates\"");
      if (cfg.replicates < 1) throw ConfigError(origin + ": \"replicate.replicates\" must be positive");
    }
    if (const json* f = find_field(*r, "workers")) cfg.workers = as_int(*f, origin + ": \"replicate.workers\"");
    if (const json* f = find_field(*r, "max_failure_rate")) {
      cfg.max_failure_rate = as_number(*f, origin + ": \"replicate.max_failure_rate\"");
      if (cfg.max_failure_rate < 0 || cfg.max_failure_rate > 1)
        throw ConfigError(origin + ": \"replicate.max_failure_rate\" must lie in [0, 1]");
    }
  }

  return cfg;
}

FitConfig FitConfig::from_file(const std::string& path) {
  return from_json_text(read_text_file(path), path);
}

ModelSpec model_from_config(const FitConfig& config) {
  ModelSpec spec;
  spec.structural = structural_registry(config.structural_id);
  spec.error = ErrorModel::from_name(config.error_name);
  return spec;
}

namespace {

ThetaParams theta_init_impl(const FitConfig& config, int K, double sigma2_fallback) {
  const StructuralModel& sm = structural_registry(config.structural_id);
  const int p = sm.p();

  ThetaParams theta;
  theta.structure = config.structure;
  theta.mu = config.init.mu.value_or(Eigen::VectorXd::Zero(p));
  if (theta.mu.size() != p)
    throw ConfigError("init.mu: expected " + std::to_string(p) + " entries for model " + config.structural_id);
  if (config.init.beta) {
    theta.beta = *config.init.beta;
    if (theta.beta.rows() != K || theta.beta.cols() != p)
      throw ConfigError("init.beta: expected " + std::to_string(K) + " x " + std::to_string(p) +
                        " for this dataset");
  } else {
    theta.beta = Eigen::MatrixXd::Zero(K, p);
  }
  theta.omega = config.init.omega.value_or(0.1 * Eigen::MatrixXd::Identity(p, p));
  theta.psi = config.init.psi.value_or(0.1 * Eigen::MatrixXd::Identity(p, p));
  if (theta.omega.rows() != p || theta.omega.cols() != p)
    throw ConfigError("init.omega: expected a " + std::to_string(p) + " x " + std::to_string(p) + " covariance");
  if (theta.psi.rows() != p || theta.psi.cols() != p)
    throw ConfigError("init.psi: expected a " + std::to_string(p) + " x " + std::to_string(p) + " covariance");

  theta.sigma2 = config.init.sigma2.value_or(sigma2_fallback);

  try {
    theta.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("init: ") + e.what());
  }
  return theta;
}

}  // namespace

ThetaParams resolve_theta_init(const FitConfig& config, const Dataset& data) {
  double fallback = 0.1;
  if (!config.init.sigma2) {
    double sum = 0.0, sum2 = 0.0;
    long count = 0;
    for (const SubjectData& subject : data.subjects)
      for (const UnitData& unit : subject.units)
        for (const double v : unit.dv) {
          sum += v;
          sum2 += v * v;
          ++count;
        }
    const double mean = count > 0 ? sum / static_cast<double>(count) : 0.0;
    const double var = count > 1 ? (sum2 - static_cast<double>(count) * mean * mean) / static_cast<double>(count - 1)
                                 : 0.0;
    fallback = std::max(var / 10.0, 1e-4);
  }
  return theta_init_impl(config, data.n_units(), fallback);
}

ThetaParams resolve_theta_init(const FitConfig& config, int K) {
  return theta_init_impl(config, K, 0.1);
}

BetaZeroMask resolve_beta_mask(const FitConfig& config, int K, const std::vector<std::string>& param_names) {
  BetaZeroMask mask = default_beta_mask(K, static_cast<int>(param_names.size()));
  for (const std::string& name : config.beta_zero) {
    const auto [k, j] = resolve_beta_component(name, K, param_names);
    mask(k, j) = true;
  }
  return mask;
}

SaemConfig saem_config_from(const FitConfig& config, const Dataset& data) {
  const StructuralModel& sm = structural_registry(config.structural_id);
  SaemConfig sc;
  sc.n_iterations = config.n_iterations;
  sc.burn_in = config.burn_in;
  sc.n_chains = config.n_chains;
  sc.anneal_decay = config.anneal_decay;
  sc.theta_init = resolve_theta_init(config, data);
  sc.kernels = config.kernels;
  sc.beta_zero_mask = resolve_beta_mask(config, data.n_units(), sm.param_names);
  sc.seed = config.seed;
  return sc;
}

TrialDesign trial_design_from(const FitConfig& config) {
  if (!config.design) throw ConfigError("config has no \"design\" section");
  const FitConfig::Design& d = *config.design;
  if (!d.theta_true) throw ConfigError("\"design.theta_true\" is required for simulation");

  const StructuralModel& sm = structural_registry(config.structural_id);
  TrialDesign td;
  td.n_subjects = d.n_subjects;
  td.n_units = d.n_units;
  td.times = d.times;
  td.dose = d.dose;
  td.tau = d.tau;
  td.theta_true = *d.theta_true;
  if (td.theta_true.p() != sm.p())
    throw ConfigError("\"design.theta_true\": expected " + std::to_string(sm.p()) + " parameters for model " +
                      config.structural_id);
  if (sm.needs_tau && !td.tau)
    throw ConfigError("model " + config.structural_id + " requires \"design.tau\"");
  try {
    td.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("design: ") + e.what());
  }
  return td;
}

// ----------------------------------------------------------------- results

void write_fit_json(const FitRecord& record, const std::string& path) {
  json j;
  j["format_version"] = record.format_version;
  j["model"] = {{"structural", record.structural_id},
                {"error", record.error_name},
                {"covariance", cov_structure_name(record.structure)}};
  j["data_file"] = record.data_file;
  j["seed"] = record.seed;
  j["saem"] = {{"iterations", record.n_iterations}, {"burn_in", record.burn_in}};
  j["parameter_names"] = record.param_names;
  j["n_subjects"] = record.n_subjects;
  j["n_units"] = record.n_units;
  j["constraints"] = record.constraints;
  j["theta_hat"] = theta_json(record.theta_hat);
  j["standard_errors"] = record.standard_errors;
  j["se_excluded"] = record.se_excluded;
  j["fim"] = {{"condition", record.fim_condition}, {"invertible", record.fim_invertible}};
  if (record.loglik) {
    j["loglik"] = {{"value", record.loglik->value},
                   {"mc_standard_error", record.loglik->mc_standard_error},
                   {"samples", record.loglik->samples}};
  }
  json tests = json::array();
  for (const TestResult& t : record.tests) {
    tests.push_back({{"method", t.method},
                     {"component", t.component},
                     {"statistic", t.statistic},
                     {"p_value", t.p_value},
                     {"mc_caveat", t.mc_caveat}});
  }
  j["tests"] = tests;
  j["kernels"] = kernels_json(record.kernels);
  j["inference"] = inference_json(record.inference);
  j["diagnostics"] = {{"stabilized", record.stabilized},
                      {"max_rel_range_last50", record.max_rel_range_last50},
                      {"floored_iterations", record.floored_iterations},
                      {"acceptance",
                       {{"prior", record.acc_prior},
                        {"rw_full", record.acc_rw_full},
                        {"rw_component", record.acc_rw_component}}}};
  atomic_write_text(path, j.dump(2) + "\n");
}

FitRecord read_fit_json(const std::string& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::parse_error& e) {
    throw ParseError(path + ": " + e.what());
  }
  require_object(j, path);

  FitRecord rec;
  rec.format_version = as_int(require_field(j, "format_version", path), path + ": \"format_version\"");
  if (rec.format_version != 1)
    throw ConfigError(path + ": unsupported format_version " + std::to_string(rec.format_version));

  const json& m = require_field(j, "model", path);
  rec.structural_id = as_string(require_field(m, "structural", path), path + ": \"model.structural\"");
  rec.error_name = as_string(require_field(m, "error", path), path + ": \"model.error\"");
  rec.structure = cov_structure_from_name(as_string(require_field(m, "covariance", path), path));

  rec.data_file = as_string(require_field(j, "data_file", path), path + ": \"data_file\"");
  rec.seed = as_seed(require_field(j, "seed", path), path + ": \"seed\"");
  const json& s = require_field(j, "saem", path);
  rec.n_iterations = as_int(require_field(s, "iterations", path), path + ": \"saem.iterations\"");
  rec.burn_in = as_int(require_field(s, "burn_in", path), path + ": \"saem.burn_in\"");

  for (const json& e : require_field(j, "parameter_names", path))
    rec.param_names.push_back(as_string(e, path + ": \"parameter_names\""));
  rec.n_subjects = as_int(require_field(j, "n_subjects", path), path + ": \"n_subjects\"");
  rec.n_units = as_int(require_field(j, "n_units", path), path + ": \"n_units\"");
  if (const json* c = find_field(j, "constraints"))
    for (const json& e : *c) rec.constraints.push_back(as_string(e, path + ": \"constraints\""));

  const json& th = require_field(j, "theta_hat", path);
  rec.theta_hat.structure = rec.structure;
  rec.theta_hat.mu = as_vector(require_field(th, "mu", path), path + ": \"theta_hat.mu\"");
  rec.theta_hat.beta = as_matrix(require_field(th, "beta", path), path + ": \"theta_hat.beta\"");
  rec.theta_hat.omega = as_matrix(require_field(th, "omega", path), path + ": \"theta_hat.omega\"");
  rec.theta_hat.psi = as_matrix(require_field(th, "psi", path), path + ": \"theta_hat.psi\"");
  rec.theta_hat.sigma2 = as_number(require_field(th, "sigma2", path), path + ": \"theta_hat.sigma2\"");
  try {
    rec.theta_hat.validate();
  } catch (const std::exception& e) {
    throw ConfigError(path + ": \"theta_hat\": " + e.what());
  }

  if (const json* se = find_field(j, "standard_errors")) {
    require_object(*se, path + ": \"standard_errors\"");
    for (const auto& item : se->items())
      rec.standard_errors[item.key()] = as_number(item.value(), path + ": \"standard_errors\"");
  }
  if (const json* ex = find_field(j, "se_excluded"))
    for (const json& e : *ex) rec.se_excluded.push_back(as_string(e, path + ": \"se_excluded\""));

  if (const json* f = find_field(j, "fim")) {
    rec.fim_condition = number_or(*f, "condition", 0.0);
    if (const json* inv = find_field(*f, "invertible")) rec.fim_invertible = as_bool(*inv, path + ": \"fim\"");
  }

  if (const json* ll = find_field(j, "loglik")) {
    LoglikEstimate est;
    est.value = as_number(require_field(*ll, "value", path), path + ": \"loglik.value\"");
    est.mc_standard_error = number_or(*ll, "mc_standard_error", 0.0);
    est.samples = find_field(*ll, "samples") ? as_int(*find_field(*ll, "samples"), path) : 0;
    rec.loglik = est;
  }

  if (const json* ts = find_field(j, "tests")) {
    for (const json& t : *ts) {
      TestResult r;
      r.method = as_string(require_field(t, "method", path), path + ": \"tests.method\"");
      r.component = as_string(require_field(t, "component", path), path + ": \"tests.component\"");
      r.statistic = as_number(require_field(t, "statistic", path), path + ": \"tests.statistic\"");
      r.p_value = as_number(require_field(t, "p_value", path), path + ": \"tests.p_value\"");
      if (const json* c = find_field(t, "mc_caveat")) r.mc_caveat = as_bool(*c, path + ": \"tests\"");
      rec.tests.push_back(std::move(r));
    }
  }

  if (const json* k = find_field(j, "kernels")) rec.kernels = parse_kernels(*k, path + ": \"kernels\"");
  if (const json* inf = find_field(j, "inference")) rec.inference = parse_inference(*inf, path + ": \"inference\"");

  if (const json* d = find_field(j, "diagnostics")) {
    if (const json* f = find_field(*d, "stabilized")) rec.stabilized = as_bool(*f, path + ": \"diagnostics\"");
    rec.max_rel_range_last50 = number_or(*d, "max_rel_range_last50", 0.0);
    if (const json* f = find_field(*d, "floored_iterations"))
      rec.floored_iterations = as_int(*f, path + ": \"diagnostics\"");
    if (const json* a = find_field(*d, "acceptance")) {
      rec.acc_prior = number_or(*a, "prior", 0.0);
      rec.acc_rw_full = number_or(*a, "rw_full", 0.0);
      rec.acc_rw_component = number_or(*a, "rw_component", 0.0);
    }
  }

  return rec;
}

void write_trace_csv(const std::vector<IterationRecord>& trace, const std::vector<std::string>& names,
                     const std::string& path) {
  std::string out = "iteration";
  for (const std::string& n : names) {
    out += ',';
    out += n;
  }
  out += ",acc_prior,acc_rw_full,acc_rw_component,floored_omega,floored_psi,floored_sigma2\n";
  for (const IterationRecord& rec : trace) {
    if (rec.theta_flat.size() != static_cast<Eigen::Index>(names.size()))
      throw std::logic_error("trace record does not match component names");
    out += std::to_string(rec.iteration);
    for (Eigen::Index i = 0; i < rec.theta_flat.size(); ++i) {
      out += ',';
      out += format_double(rec.theta_flat[i]);
    }
    out += ',';
    out += format_double(rec.acc_prior);
    out += ',';
    out += format_double(rec.acc_rw_full);
    out += ',';
    out += format_double(rec.acc_rw_component);
    out += ',';
    out += rec.floored_omega ? '1' : '0';
    out += ',';
    out += rec.floored_psi ? '1' : '0';
    out += ',';
    out += rec.floored_sigma2 ? '1' : '0';
    out += '\n';
  }
  atomic_write_text(path, out);
}

void write_gof_csv(const Dataset& data, const ModelSpec& model, const ThetaParams& theta,
                   const std::vector<Eigen::MatrixXd>& phi_cond_mean, const std::string& path) {
  if (static_cast<int>(phi_cond_mean.size()) != data.n_subjects())
    throw std::logic_error("conditional means do not match the dataset");
  const double sigma = std::sqrt(theta.sigma2);
  std::string out = "subject_id,unit,time,dv,pred_pop,pred_ind,std_resid\n";
  for (int i = 0; i < data.n_subjects(); ++i) {
    const SubjectData& subject = data.subjects[static_cast<size_t>(i)];
    for (size_t ku = 0; ku < subject.units.size(); ++ku) {
      const UnitData& unit = subject.units[ku];
      const Eigen::VectorXd phi_pop = theta.unit_mean(static_cast<int>(ku));
      const Eigen::VectorXd phi_ind = phi_cond_mean[static_cast<size_t>(i)].row(static_cast<Eigen::Index>(ku));
      for (size_t r = 0; r < unit.times.size(); ++r) {
        const double f_pop = model.structural.predict(unit.times[r], phi_pop, unit.dose);
        const double f_ind = model.structural.predict(unit.times[r], phi_ind, unit.dose);
        const double g = model.error.scale(f_ind);
        const double resid = (unit.dv[r] - f_ind) / (sigma * g);
        out += subject.id;
        out += ',';
        out += std::to_string(unit.unit);
        out += ',';
        out += format_double(unit.times[r]);
        out += ',';
        out += format_double(unit.dv[r]);
        out += ',';
        out += format_double(f_pop);
        out += ',';
        out += format_double(f_ind);
        out += ',';
        out += format_double(resid);
        out += '\n';
      }
    }
  }
  atomic_write_text(path, out);
}

namespace {

std::string rejection_line(const char* label, const RejectionSummary& s) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%s rejection: %d/%d = %.1f%% (95%% CI %.1f%%..%.1f%%)\n", label,
                s.rejections, s.evaluated, 100.0 * s.rate, 100.0 * s.ci_low, 100.0 * s.ci_high);
  return buf;
}

json rejection_json(const RejectionSummary& s) {
  return {{"rejections", s.rejections},
          {"evaluated", s.evaluated},
          {"rate", s.rate},
          {"ci_low", s.ci_low},
          {"ci_high", s.ci_high}};
}

}  // namespace

void write_report(const ReplicationReport& report, const std::string& csv_path) {
  const size_t n_params = report.param_names.size();

  std::string csv = "parameter,true_value,summary_scale,bias_pct,rmse_pct\n";
  for (size_t jx = 0; jx < n_params; ++jx) {
    const Eigen::Index e = static_cast<Eigen::Index>(jx);
    csv += report.param_names[jx];
    csv += ',';
    csv += format_double(report.theta_true_flat[e]);
    csv += ',';
    csv += report.absolute_scale[jx] ? "absolute_x100" : "relative";
    csv += ',';
    csv += format_double(report.rel_bias_pct[e]);
    csv += ',';
    csv += format_double(report.rel_rmse_pct[e]);
    csv += '\n';
  }
  atomic_write_text(csv_path, csv);

  std::filesystem::path base(csv_path);
  const std::string txt_path = std::filesystem::path(base).replace_extension(".txt").string();
  const std::string json_path = std::filesystem::path(base).replace_extension(".json").string();

  std::string txt;
  {
    char buf[200];
    std::snprintf(buf, sizeof(buf), "replication summary: %d replicates, %d failed, seed %llu, %.1f s\n\n",
                  report.replicates, report.failures, static_cast<unsigned long long>(report.seed),
                  report.runtime_seconds);
    txt += buf;
    std::snprintf(buf, sizeof(buf), "%-16s %12s %10s %10s  %s\n", "parameter", "true", "bias%", "rmse%",
                  "scale");
    txt += buf;
    for (size_t jx = 0; jx < n_params; ++jx) {
      const Eigen::Index e = static_cast<Eigen::Index>(jx);
      std::snprintf(buf, sizeof(buf), "%-16s %12.4f %10.2f %10.2f  %s\n", report.param_names[jx].c_str(),
                    report.theta_true_flat[e], report.rel_bias_pct[e], report.rel_rmse_pct[e],
                    report.absolute_scale[jx] ? "absolute(x100)" : "relative");
      txt += buf;
    }
    txt += '\n';
    if (report.wald) txt += rejection_line("wald", *report.wald);
    if (report.lrt) txt += rejection_line("lrt ", *report.lrt);
    if (report.mean_fim_se_component > 0) {
      std::snprintf(buf, sizeof(buf), "se calibration: empirical sd %.6f, mean fim se %.6f\n",
                    report.empirical_sd_component, report.mean_fim_se_component);
      txt += buf;
    }
    for (const std::string& msg : report.failure_messages) txt += "failure: " + msg + "\n";
  }
  atomic_write_text(txt_path, txt);

  json j;
  j["format_version"] = 1;
  j["replicates"] = report.replicates;
  j["failures"] = report.failures;
  j["failure_messages"] = report.failure_messages;
  j["seed"] = report.seed;
  j["runtime_seconds"] = report.runtime_seconds;
  j["parameter_names"] = report.param_names;
  j["theta_true"] = vector_json(report.theta_true_flat);
  j["bias_pct"] = vector_json(report.rel_bias_pct);
  j["rmse_pct"] = vector_json(report.rel_rmse_pct);
  j["absolute_scale"] = report.absolute_scale;
  if (report.wald) j["wald"] = rejection_json(*report.wald);
  if (report.lrt) j["lrt"] = rejection_json(*report.lrt);
  j["empirical_sd_component"] = report.empirical_sd_component;
  j["mean_fim_se_component"] = report.mean_fim_se_component;
  if (report.estimates.rows() > 0) j["estimates"] = matrix_json(report.estimates);
  atomic_write_text(json_path, j.dump(2) + "\n");
}

}  // namespace saemx
