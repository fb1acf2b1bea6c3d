#include "io/case_io.hpp"

#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace fmpl {

using nlohmann::json;

std::vector<int64_t> rle_encode(const Mask& m) {
  std::vector<int64_t> runs;
  uint8_t cur = 0;
  int64_t len = 0;
  for (uint8_t v : m) {
    uint8_t b = v ? 1 : 0;
    if (b == cur) {
      ++len;
    } else {
      runs.push_back(len);
      cur = b;
      len = 1;
    }
  }
  runs.push_back(len);
  return runs;
}

Mask rle_decode(const std::vector<int64_t>& runs, int64_t n) {
  Mask m;
  m.reserve(size_t(n));
  uint8_t cur = 0;
  for (int64_t r : runs) {
    if (r < 0) throw std::runtime_error("rle_decode: negative run");
    m.insert(m.end(), size_t(r), cur);
    cur = cur ? 0 : 1;
  }
  if (int64_t(m.size()) != n) throw std::runtime_error("rle_decode: length mismatch");
  return m;
}

namespace {

json tensor_values(const Tensor& t) {
  json a = json::array();
  for (int64_t i = 0; i < t.size(); ++i) a.push_back(t.at(i));
  return a;
}

Tensor tensor_from(const json& a, std::vector<int> shape) {
  std::vector<double> v;
  v.reserve(a.size());
  for (const auto& x : a) v.push_back(x.get<double>());
  return Tensor::from(std::move(shape), std::move(v));
}

json vec_values(const std::vector<double>& v) {
  json a = json::array();
  for (double x : v) a.push_back(x);
  return a;
}

const char* provenance_str(Provenance p) {
  switch (p) {
    case Provenance::SyntheticGroundTruth: return "synthetic-ground-truth";
    case Provenance::Generated: return "generated";
    case Provenance::Sequenced: return "sequenced";
  }
  return "?";
}

Provenance provenance_from(const std::string& s) {
  if (s == "synthetic-ground-truth") return Provenance::SyntheticGroundTruth;
  if (s == "generated") return Provenance::Generated;
  if (s == "sequenced") return Provenance::Sequenced;
  throw std::runtime_error("unknown provenance: " + s);
}

void write_json(const std::string& path, const json& j) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  os << j.dump();
  os << "\n";
  if (!os) throw std::runtime_error("write failed: " + path);
}

json read_json(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open: " + path);
  json j;
  is >> j;
  return j;
}

json plan_to_json(const Plan& p) {
  json j;
  j["fluence"] = tensor_values(p.fluence);
  j["fluence_shape"] = p.fluence.shape;
  j["mu"] = vec_values(p.mu);
  j["provenance"] = provenance_str(p.provenance);
  return j;
}

Plan plan_from_json(const json& j) {
  Plan p;
  p.fluence = tensor_from(j.at("fluence"), j.at("fluence_shape").get<std::vector<int>>());
  p.mu = j.at("mu").get<std::vector<double>>();
  p.provenance = provenance_from(j.at("provenance").get<std::string>());
  return p;
}

}  // namespace

void save_case(const std::string& path, const Case& cs) {
  json j;
  j["seed"] = cs.seed;
  j["machine"] = {{"n_rows", cs.machine.n_rows},
                  {"n_cols", cs.machine.n_cols},
                  {"max_leaf_travel_per_cp", cs.machine.max_leaf_travel_per_cp},
                  {"min_gap", cs.machine.min_gap},
                  {"mu_min", cs.machine.mu_min},
                  {"mu_max", cs.machine.mu_max},
                  {"max_mu_delta_per_cp", cs.machine.max_mu_delta_per_cp}};
  j["arc"] = {{"n_cp", cs.arc.n_cp}, {"gantry_deg", vec_values(cs.arc.gantry_deg)}};
  json ph;
  ph["mu"] = vec_values(cs.phantom.mu);
  ph["body_rle"] = rle_encode(cs.phantom.body);
  ph["ptv_rle"] = rle_encode(cs.phantom.ptv);
  ph["oar1_rle"] = rle_encode(cs.phantom.oars[0]);
  ph["oar2_rle"] = rle_encode(cs.phantom.oars[1]);
  ph["seed"] = cs.phantom.seed;
  j["phantom"] = std::move(ph);
  j["dstar"] = tensor_values(cs.dstar);
  j["truth"] = plan_to_json(cs.truth);
  write_json(path, j);
}

Case load_case(const std::string& path) {
  json j = read_json(path);
  Case cs;
  cs.seed = j.at("seed").get<uint64_t>();
  const json& m = j.at("machine");
  cs.machine.n_rows = m.at("n_rows").get<int>();
  cs.machine.n_cols = m.at("n_cols").get<int>();
  cs.machine.max_leaf_travel_per_cp = m.at("max_leaf_travel_per_cp").get<double>();
  cs.machine.min_gap = m.at("min_gap").get<double>();
  cs.machine.mu_min = m.at("mu_min").get<double>();
  cs.machine.mu_max = m.at("mu_max").get<double>();
  cs.machine.max_mu_delta_per_cp = m.at("max_mu_delta_per_cp").get<double>();
  const json& a = j.at("arc");
  cs.arc.n_cp = a.at("n_cp").get<int>();
  cs.arc.gantry_deg = a.at("gantry_deg").get<std::vector<double>>();
  const json& ph = j.at("phantom");
  cs.phantom.mu = ph.at("mu").get<std::vector<double>>();
  cs.phantom.body = rle_decode(ph.at("body_rle").get<std::vector<int64_t>>(), kGridN);
  cs.phantom.ptv = rle_decode(ph.at("ptv_rle").get<std::vector<int64_t>>(), kGridN);
  cs.phantom.oars[0] = rle_decode(ph.at("oar1_rle").get<std::vector<int64_t>>(), kGridN);
  cs.phantom.oars[1] = rle_decode(ph.at("oar2_rle").get<std::vector<int64_t>>(), kGridN);
  cs.phantom.seed = ph.at("seed").get<uint64_t>();
  cs.dstar = tensor_from(j.at("dstar"), {kGridZ, kGridY, kGridX});
  cs.truth = plan_from_json(j.at("truth"));
  return cs;
}

void save_plan(const std::string& path, const PlanFile& pf) {
  json j = plan_to_json(pf.plan);
  if (pf.dose.defined()) {
    j["dose"] = tensor_values(pf.dose);
    j["dose_shape"] = pf.dose.shape;
  }
  j["optimizer"] = pf.optimizer;
  j["steps"] = pf.steps;
  j["plan_seed"] = pf.seed;
  write_json(path, j);
}

PlanFile load_plan(const std::string& path) {
  json j = read_json(path);
  PlanFile pf;
  pf.plan = plan_from_json(j);
  if (j.contains("dose"))
    pf.dose = tensor_from(j.at("dose"), j.at("dose_shape").get<std::vector<int>>());
  pf.optimizer = j.value("optimizer", "");
  pf.steps = j.value("steps", 0);
  pf.seed = j.value("plan_seed", uint64_t(0));
  return pf;
}

}  // namespace fmpl
