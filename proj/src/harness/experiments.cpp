#include "harness/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <thread>

namespace fmpl {

namespace fs = std::filesystem;

std::vector<std::string> list_case_files(const std::string& dir) {
  std::vector<std::string> out;
  if (!fs::is_directory(dir)) throw std::runtime_error("not a directory: " + dir);
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::string name = e.path().filename().string();
    if (name.rfind("case_", 0) == 0 && e.path().extension() == ".json")
      out.push_back(e.path().string());
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw std::runtime_error("no case_*.json files in " + dir);
  return out;
}

std::vector<Case> load_cases(const std::vector<std::string>& files) {
  std::vector<Case> out;
  out.reserve(files.size());
  for (const auto& f : files) out.push_back(load_case(f));
  return out;
}

MetricsRow evaluate_plan_row(const Case& cs, const Tensor& dose, const Tensor& fluence,
                             const std::string& optimizer, int steps, double seconds) {
  MetricsRow row;
  Mask oar_union(size_t(kGridN), 0);
  for (int64_t i = 0; i < kGridN; ++i)
    oar_union[size_t(i)] = cs.phantom.oars[0][size_t(i)] | cs.phantom.oars[1][size_t(i)];
  row.case_id = "case-" + std::to_string(cs.seed);
  row.optimizer = optimizer;
  row.steps = steps;
  row.mae = mae(dose, cs.dstar, &cs.phantom.body);
  row.mae_ptv = mae(dose, cs.dstar, &cs.phantom.ptv);
  row.mae_oars = mae(dose, cs.dstar, &oar_union);
  row.psnr = psnr(dose, cs.dstar);
  row.ssim = ssim3d(dose, cs.dstar);
  row.hi = homogeneity_index(dvh(dose, cs.phantom.ptv));
  std::vector<Tensor> mine, truth;
  int n_cp = fluence.dim(0);
  for (int cp = 0; cp < n_cp; ++cp) {
    Tensor m = Tensor::zeros({cs.machine.n_rows, cs.machine.n_cols});
    std::copy_n(fluence.ptr() + int64_t(cp) * m.size(), m.size(), m.mut());
    mine.push_back(std::move(m));
    Tensor t = Tensor::zeros({cs.machine.n_rows, cs.machine.n_cols});
    std::copy_n(cs.truth.fluence.ptr() + int64_t(cp) * t.size(), t.size(), t.mut());
    truth.push_back(std::move(t));
  }
  row.frechet = frechet_proxy(mine, truth);
  row.seconds = seconds;
  return row;
}

std::string metrics_csv_header() {
  return "case_id,optimizer,steps,mae,mae_ptv,mae_oars,psnr,ssim,hi,frechet,seconds";
}

namespace {
std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}
}  // namespace

std::string metrics_csv_line(const MetricsRow& r) {
  std::string s = r.case_id + "," + r.optimizer + "," + std::to_string(r.steps);
  for (double v : {r.mae, r.mae_ptv, r.mae_oars, r.psnr, r.ssim, r.hi, r.frechet,
                   r.seconds})
    s += "," + fmt(v);
  return s;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows,
                       const std::vector<std::string>& extra_lines) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  os << metrics_csv_header() << "\n";
  for (const auto& r : rows) os << metrics_csv_line(r) << "\n";
  for (const auto& l : extra_lines) os << l << "\n";
  if (!os) throw std::runtime_error("write failed: " + path);
}

void write_trace_csv(const std::string& path, const std::vector<StepRecord>& trace) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  os << "step,l_dose,l_cont_z,l_cont_mu,total\n";
  for (size_t i = 0; i < trace.size(); ++i) {
    char buf[200];
    std::snprintf(buf, sizeof(buf), "%zu,%.17g,%.17g,%.17g,%.17g\n", i + 1,
                  trace[i].l_dose, trace[i].l_cont_z, trace[i].l_cont_mu,
                  trace[i].total);
    os << buf;
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

void write_curve_csv(const std::string& path, const std::vector<double>& values,
                     const std::string& value_name) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for write: " + path);
  os << "step," << value_name << "\n";
  for (size_t i = 0; i < values.size(); ++i) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%zu,%.17g\n", i + 1, values[i]);
    os << buf;
  }
  if (!os) throw std::runtime_error("write failed: " + path);
}

OptimizerChoice optimizer_from_name(const std::string& name,
                                    const MetaOptimizerParams* meta) {
  OptimizerChoice c;
  if (name == "l2o") {
    c.learned = true;
    c.meta = meta;
    if (meta == nullptr)
      throw std::invalid_argument("optimizer l2o requires meta parameters (--l2o)");
  } else if (name == "adam") {
    c.baseline = BaselineKind::Adam;
  } else if (name == "sgdm") {
    c.baseline = BaselineKind::SgdMomentum;
  } else if (name == "rmsprop") {
    c.baseline = BaselineKind::RmsProp;
  } else {
    throw std::invalid_argument("unknown optimizer: " + name);
  }
  return c;
}

int env_threads() {
  const char* v = std::getenv("FMPL_THREADS");
  if (!v) return 1;
  int n = std::atoi(v);
  return n < 1 ? 1 : n;
}

CompareOutput run_compare(const std::vector<Case>& cases, GeneratorParams G,
                          const MetaOptimizerParams* meta, const CompareSpec& spec,
                          const Config& cfg) {
  if (cases.empty()) throw std::runtime_error("run_compare: no cases");
  for (const auto& name : spec.optimizers)
    optimizer_from_name(name, name == "l2o" ? meta : nullptr);  // validate early

  struct Slot {
    std::vector<MetricsRow> rows;
  };
  std::vector<Slot> slots(cases.size());

  int n_threads = std::min<int>(env_threads(), int(cases.size()));
  std::atomic<size_t> next{0};

  auto worker = [&]() {
    GeneratorParams Gw = G;  // worker-private requires_grad flags
    MetaOptimizerParams metaw;
    if (meta != nullptr) metaw = *meta;
    for (;;) {
      size_t i = next.fetch_add(1);
      if (i >= cases.size()) break;
      const Case& cs = cases[i];
      PlanningProblem prob = make_problem(cs);
      prob.lambda_z = cfg.lambda_z;
      prob.lambda_mu = cfg.lambda_mu;
      prob.lambda_x = cfg.lambda_x;
      for (const auto& oname : spec.optimizers) {
        OptimizerChoice choice =
            optimizer_from_name(oname, meta != nullptr ? &metaw : nullptr);
        for (int steps : spec.steps) {
          auto t0 = std::chrono::steady_clock::now();
          PlanOutcome out = plan_case(prob, Gw, choice, steps, spec.seed, cfg.l2plan);
          double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                            .count();
          slots[i].rows.push_back(evaluate_plan_row(cs, out.dose, out.plan.fluence,
                                                    oname, steps, secs));
          if (spec.with_ls) {
            SequencedPlan sp = sequence_plan(out.plan, cs.machine);
            LsComparison cmp = post_ls_metrics(cs, *prob.A, out.plan, out.dose, sp,
                                               oname, steps);
            cmp.post.seconds = secs;
            slots[i].rows.push_back(cmp.post);
          }
        }
      }
    }
  };

  if (n_threads <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  CompareOutput out;
  for (auto& s : slots)
    for (auto& r : s.rows) out.rows.push_back(std::move(r));

  // summary: mean/std per (optimizer, steps), paired t vs l2o where possible
  std::map<std::pair<std::string, int>, std::vector<const MetricsRow*>> groups;
  for (const auto& r : out.rows) groups[{r.optimizer, r.steps}].push_back(&r);

  auto stat_line = [&](const std::string& which, const std::string& opt, int steps,
                       auto pick) {
    const auto& g = groups[{opt, steps}];
    double mean = 0.0;
    for (auto* r : g) mean += pick(*r);
    mean /= double(g.size());
    double var = 0.0;
    for (auto* r : g) var += (pick(*r) - mean) * (pick(*r) - mean);
    var = g.size() > 1 ? var / double(g.size() - 1) : 0.0;
    return which + "," + opt + "," + std::to_string(steps) + "," + fmt(mean) + "," +
           fmt(std::sqrt(var));
  };

  for (const auto& [key, g] : groups) {
    (void)g;
    out.summary_lines.push_back(
        "# mean_std_mae," +
        stat_line("mae", key.first, key.second, [](const MetricsRow& r) { return r.mae; }));
    out.summary_lines.push_back(
        "# mean_std_psnr," +
        stat_line("psnr", key.first, key.second,
                  [](const MetricsRow& r) { return r.psnr; }));
  }

  // paired t-tests of MAE against the l2o rows at matching steps
  for (const auto& [key, g] : groups) {
    if (key.first == "l2o" || key.first.rfind("l2o", 0) == 0) continue;
    auto ref = groups.find({"l2o", key.second});
    if (ref == groups.end() && !groups.empty()) {
      for (const auto& [k2, g2] : groups) {
        (void)g2;
        if (k2.first == "l2o") {
          ref = groups.find(k2);
          break;
        }
      }
    }
    if (ref == groups.end() || ref->second.size() != g.size()) continue;
    std::vector<double> a, b;
    for (size_t i = 0; i < g.size(); ++i) {
      a.push_back(g[i]->mae);
      b.push_back(ref->second[i]->mae);
    }
    try {
      TTestResult t = paired_t_test(a, b);
      out.summary_lines.push_back("# p_mae_vs_l2o," + key.first + "," +
                                  std::to_string(key.second) + "," + fmt(t.p));
    } catch (const std::invalid_argument&) {
      out.summary_lines.push_back("# p_mae_vs_l2o," + key.first + "," +
                                  std::to_string(key.second) + ",nan");
    }
  }
  return out;
}

}  // namespace fmpl
