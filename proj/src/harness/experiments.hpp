#pragma once

#include <string>
#include <vector>

#include "harness/config.hpp"
#include "io/case_io.hpp"
#include "leafseq/leafseq.hpp"

namespace fmpl {

std::vector<std::string> list_case_files(const std::string& dir);

// Builds the deposition operator once per case.
std::vector<Case> load_cases(const std::vector<std::string>& files);

MetricsRow evaluate_plan_row(const Case& cs, const Tensor& dose, const Tensor& fluence,
                             const std::string& optimizer, int steps, double seconds);

std::string metrics_csv_header();
std::string metrics_csv_line(const MetricsRow& r);
void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows,
                       const std::vector<std::string>& extra_lines = {});

void write_trace_csv(const std::string& path, const std::vector<StepRecord>& trace);
void write_curve_csv(const std::string& path, const std::vector<double>& values,
                     const std::string& value_name);

struct CompareSpec {
  std::vector<std::string> optimizers;  // "l2o", "adam", "sgdm", "rmsprop"
  std::vector<int> steps;
  bool with_ls = false;
  uint64_t seed = 0;
};

struct CompareOutput {
  std::vector<MetricsRow> rows;
  std::vector<std::string> summary_lines;  // mean/std/p-value lines
};

OptimizerChoice optimizer_from_name(const std::string& name,
                                    const MetaOptimizerParams* meta);

// One row per (case, optimizer, steps); workers fan out per case
// (FMPL_THREADS), merged in case order.
CompareOutput run_compare(const std::vector<Case>& cases, GeneratorParams G,
                          const MetaOptimizerParams* meta, const CompareSpec& spec,
                          const Config& cfg);

int env_threads();

}  // namespace fmpl
