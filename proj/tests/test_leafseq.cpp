#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "core/rng.hpp"
#include "domain/domain.hpp"
#include "leafseq/leafseq.hpp"

using namespace fmpl;

TEST_CASE("rectangular profile round-trips exactly") {
  MachineConstraints c;
  Tensor f = Tensor::zeros({c.n_rows, c.n_cols});
  for (int r = 0; r < c.n_rows; ++r)
    for (int col = 5; col < 14; ++col) f.mut()[int64_t(r) * c.n_cols + col] = 2.75;
  Aperture ap = sequence_cp(f, c, nullptr);
  for (int r = 0; r < c.n_rows; ++r) {
    CHECK(ap.open[size_t(r)] == 1);
    CHECK(ap.left[size_t(r)] == 5.0);
    CHECK(ap.right[size_t(r)] == 14.0);
  }
  CHECK(ap.intensity == 2.75);
}

TEST_CASE("all-zero map closes every row") {
  MachineConstraints c;
  Tensor f = Tensor::zeros({c.n_rows, c.n_cols});
  Aperture ap = sequence_cp(f, c, nullptr);
  for (int r = 0; r < c.n_rows; ++r) {
    CHECK(ap.open[size_t(r)] == 0);
    CHECK(ap.left[size_t(r)] == 0.0);
    CHECK(ap.right[size_t(r)] == 0.0);
  }
  CHECK(ap.intensity == 0.0);
}

TEST_CASE("bimodal rows pick the largest run, leftmost on ties") {
  MachineConstraints c;
  Tensor f = Tensor::zeros({c.n_rows, c.n_cols});
  // row 0: runs [2,5) and [8,13) above theta -> pick [8,13)
  for (int col = 2; col < 5; ++col) f.mut()[col] = 1.0;
  for (int col = 8; col < 13; ++col) f.mut()[col] = 1.0;
  // row 1: equal runs [1,4) and [10,13) -> leftmost
  for (int col = 1; col < 4; ++col) f.mut()[c.n_cols + col] = 1.0;
  for (int col = 10; col < 13; ++col) f.mut()[c.n_cols + col] = 1.0;
  Aperture ap = sequence_cp(f, c, nullptr);
  CHECK(ap.left[0] == 8.0);
  CHECK(ap.right[0] == 13.0);
  CHECK(ap.left[1] == 1.0);
  CHECK(ap.right[1] == 4.0);

  // enumeration oracle for row 0: the chosen run really is the largest
  int best_len = 0;
  for (int s = 0; s < c.n_cols; ++s) {
    int len = 0;
    while (s + len < c.n_cols && f.at(s + len) > 0.5) ++len;
    best_len = std::max(best_len, len);
  }
  CHECK(int(ap.right[0] - ap.left[0]) == best_len);
}

TEST_CASE("aperture-generated plans round-trip bit-exactly") {
  MachineConstraints c;
  Arc arc = Arc::uniform();
  for (uint64_t seed : {0ull, 4ull, 9ull, 23ull}) {
    DeliverableSample s = sample_deliverable_plan(c, arc, seed);
    Plan raw;
    raw.fluence = s.aperture_fluence;
    raw.mu = s.plan.mu;
    SequencedPlan sp = sequence_plan(raw, c);
    for (int64_t i = 0; i < raw.fluence.size(); ++i)
      CHECK(sp.f_ls.at(i) == raw.fluence.at(i));
    CHECK(sp.mu == raw.mu);
    CHECK(validate_deliverability(sp, c).empty());
  }
}

TEST_CASE("validator flags constructed violations") {
  MachineConstraints c;
  Arc arc = Arc::uniform();
  DeliverableSample s = sample_deliverable_plan(c, arc, 3);
  Plan raw;
  raw.fluence = s.aperture_fluence;
  raw.mu = s.plan.mu;
  SequencedPlan sp = sequence_plan(raw, c);
  CHECK(validate_deliverability(sp, c).empty());

  SUBCASE("travel violation") {
    SequencedPlan bad = sp;
    // teleport one leaf by twice the travel limit
    bad.apertures[5].left[3] =
        std::min(double(c.n_cols), bad.apertures[4].left[3] + 2.0 * c.max_leaf_travel_per_cp);
    bad.apertures[5].right[3] =
        std::max(bad.apertures[5].left[3] + c.min_gap, bad.apertures[5].right[3]);
    auto v = validate_deliverability(bad, c);
    int travel = 0;
    for (const auto& x : v)
      if (x.kind == "travel") {
        ++travel;
        CHECK(x.row == 3);
        CHECK((x.cp == 5 || x.cp == 6));
      }
    CHECK(travel >= 1);
  }

  SUBCASE("gap violation") {
    SequencedPlan bad = sp;
    bad.apertures[2].right[1] = bad.apertures[2].left[1] + 0.25 * c.min_gap;
    auto v = validate_deliverability(bad, c);
    bool found = false;
    for (const auto& x : v) found = found || (x.kind == "gap" && x.cp == 2 && x.row == 1);
    CHECK(found);
  }

  SUBCASE("mu bound violation") {
    SequencedPlan bad = sp;
    bad.mu[7] = c.mu_max + 1.0;
    auto v = validate_deliverability(bad, c);
    bool bound = false;
    for (const auto& x : v) bound = bound || (x.kind == "mu-bound" && x.cp == 7);
    CHECK(bound);
  }
}

TEST_CASE("sequencing is deterministic") {
  MachineConstraints c;
  Arc arc = Arc::uniform();
  DeliverableSample s = sample_deliverable_plan(c, arc, 14);
  SequencedPlan a = sequence_plan(s.plan, c);
  SequencedPlan b = sequence_plan(s.plan, c);
  for (int64_t i = 0; i < a.f_ls.size(); ++i) CHECK(a.f_ls.at(i) == b.f_ls.at(i));
}

TEST_CASE("smoothed plans stay deliverable after sequencing") {
  MachineConstraints c;
  Arc arc = Arc::uniform();
  for (uint64_t seed = 30; seed < 40; ++seed) {
    DeliverableSample s = sample_deliverable_plan(c, arc, seed);
    SequencedPlan sp = sequence_plan(s.plan, c);  // penumbra-smoothed input
    CHECK(validate_deliverability(sp, c).empty());
    // reconstruction of the smoothed stack stays close in relative L1
    double num = 0.0, den = 0.0;
    for (int64_t i = 0; i < sp.f_ls.size(); ++i) {
      num += std::fabs(sp.f_ls.at(i) - s.plan.fluence.at(i));
      den += std::fabs(s.plan.fluence.at(i));
    }
    CHECK(num / den <= 0.30);
  }
}

TEST_CASE("post_ls_metrics: identical reconstruction gives identical rows") {
  Case cs = build_case(21);
  DepositionOperator A = build_deposition(cs.phantom, cs.arc, cs.machine);
  Plan raw;
  // use the truth plan itself (already deliverable)
  raw.fluence = cs.truth.fluence;
  raw.mu = cs.truth.mu;
  Tensor dose = compute_dose(A, raw.fluence, raw.mu);

  SequencedPlan sp;
  sp.mu = raw.mu;
  sp.f_ls = raw.fluence;  // pretend sequencing was the identity
  sp.apertures.resize(size_t(cs.arc.n_cp));
  LsComparison cmp = post_ls_metrics(cs, A, raw, dose, sp, "truth", 0);
  CHECK(cmp.pre.mae == cmp.post.mae);
  CHECK(cmp.pre.ssim == cmp.post.ssim);
  CHECK(cmp.pre.psnr == cmp.post.psnr);
  CHECK(cmp.pre.case_id == cmp.post.case_id);
  CHECK(cmp.post.optimizer == "truth_ls");
}
