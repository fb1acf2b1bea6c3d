#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "domain/domain.hpp"
#include "dose/dose.hpp"
#include "leafseq/leafseq.hpp"

using namespace fmpl;

TEST_CASE("make_phantom is deterministic and well-formed") {
  Phantom a = make_phantom(1);
  Phantom b = make_phantom(1);
  CHECK(a.mu == b.mu);
  CHECK(a.body == b.body);
  CHECK(a.ptv == b.ptv);
  CHECK(a.oars[0] == b.oars[0]);
  CHECK(a.oars[1] == b.oars[1]);

  for (uint64_t seed : {0ull, 3ull, 17ull, 51ull}) {
    Phantom p = make_phantom(seed);
    for (int64_t i = 0; i < kGridN; ++i) {
      if (p.ptv[size_t(i)]) {
        CHECK(p.body[size_t(i)] == 1);
        CHECK(p.oars[0][size_t(i)] == 0);
        CHECK(p.oars[1][size_t(i)] == 0);
      }
      if (p.oars[0][size_t(i)] || p.oars[1][size_t(i)]) CHECK(p.body[size_t(i)] == 1);
      if (p.body[size_t(i)])
        CHECK(p.mu[size_t(i)] == 0.02);
      else
        CHECK(p.mu[size_t(i)] == 0.0);
    }
  }
}

TEST_CASE("phantom PTV volume over seeds 0..999") {
  int64_t min_vol = kGridN;
  for (uint64_t seed = 0; seed < 1000; ++seed) {
    Phantom p = make_phantom(seed);
    min_vol = std::min(min_vol, mask_count(p.ptv));
  }
  CHECK(min_vol >= 32);
}

TEST_CASE("sampled plans are deterministic and deliverable") {
  MachineConstraints c;
  Arc arc = Arc::uniform();
  DeliverableSample s1 = sample_deliverable_plan(c, arc, 11);
  DeliverableSample s2 = sample_deliverable_plan(c, arc, 11);
  for (int64_t i = 0; i < s1.plan.fluence.size(); ++i)
    CHECK(s1.plan.fluence.at(i) == s2.plan.fluence.at(i));
  CHECK(s1.plan.mu == s2.plan.mu);

  for (uint64_t seed = 0; seed < 16; ++seed) {
    DeliverableSample s = sample_deliverable_plan(c, arc, seed);
    Plan raw;
    raw.fluence = s.aperture_fluence;
    raw.mu = s.plan.mu;
    SequencedPlan sp = sequence_plan(raw, c);
    CHECK(validate_deliverability(sp, c).empty());
    for (int64_t i = 0; i < s.plan.fluence.size(); ++i)
      CHECK(s.plan.fluence.at(i) >= 0.0);
  }
}

TEST_CASE("frozen leaves share one aperture per row") {
  MachineConstraints c;
  c.max_leaf_travel_per_cp = 0.0;
  Arc arc = Arc::uniform();
  DeliverableSample s = sample_deliverable_plan(c, arc, 5);
  int R = c.n_rows, C = c.n_cols;
  // aperture support must match CP 0's support in every CP (values scale with MU)
  for (int cp = 1; cp < arc.n_cp; ++cp)
    for (int r = 0; r < R; ++r)
      for (int col = 0; col < C; ++col) {
        bool open0 = s.aperture_fluence.at((int64_t(0) * R + r) * C + col) > 0.0;
        bool openk = s.aperture_fluence.at((int64_t(cp) * R + r) * C + col) > 0.0;
        CHECK(open0 == openk);
      }
}

TEST_CASE("build_case determinism and dose separation") {
  Case a = build_case(7);
  Case b = build_case(7);
  for (int64_t i = 0; i < a.dstar.size(); ++i) CHECK(a.dstar.at(i) == b.dstar.at(i));

  for (uint64_t seed : {0ull, 1ull, 2ull, 13ull, 40ull, 99ull}) {
    Case cs = build_case(seed);
    double lo = 1e300;
    for (int64_t i = 0; i < cs.dstar.size(); ++i) lo = std::min(lo, cs.dstar.at(i));
    CHECK(lo >= 0.0);
    double ptv_mean = masked_mean(cs.dstar, cs.phantom.ptv);
    Mask u(size_t(kGridN), 0);
    for (int64_t i = 0; i < kGridN; ++i)
      u[size_t(i)] = cs.phantom.oars[0][size_t(i)] | cs.phantom.oars[1][size_t(i)];
    CHECK(ptv_mean > masked_mean(cs.dstar, u));
  }
}

TEST_CASE("arc spans 0..345 uniformly") {
  Arc a = Arc::uniform();
  CHECK(a.n_cp == 24);
  CHECK(a.gantry_deg.front() == 0.0);
  CHECK(a.gantry_deg.back() == doctest::Approx(345.0));
  for (int i = 1; i < a.n_cp; ++i)
    CHECK(a.gantry_deg[size_t(i)] > a.gantry_deg[size_t(i) - 1]);
  CHECK_THROWS(Arc::uniform(1));
}
