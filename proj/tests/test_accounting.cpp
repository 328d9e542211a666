#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "lcf/accounting.hpp"
#include "lcf/errors.hpp"

using namespace lcf;

namespace {

GeometrySpec paper_pair() { return GeometrySpec{2, 64, 28, 8, 128}; }
GeometrySpec symmetric_pair() { return GeometrySpec{8, 128, 28, 8, 128}; }

bool within_pct(double value, double target, double pct) {
  return std::fabs(value - target) <= pct / 100.0 * target;
}

}  // namespace

TEST_CASE("per-layer projector counts at all published widths") {
  GeometrySpec g = paper_pair();
  CHECK(g.joint_width() == 2304);
  CHECK(lcf_params_per_layer(g, 64) == 282322);
  CHECK(lcf_params_per_layer(g, 128) == 693650);
  CHECK(within_pct(static_cast<double>(lcf_params_per_layer(g, 256)), 1.9e6, 1.0));
  CHECK(within_pct(static_cast<double>(lcf_params_per_layer(g, 512)), 5.9e6, 1.0));
}

TEST_CASE("28-layer totals stay within one percent of the published figures") {
  GeometrySpec g = paper_pair();
  CHECK(within_pct(static_cast<double>(lcf_params_total(g, 64)), 7.9e6, 1.0));
  CHECK(within_pct(static_cast<double>(lcf_params_total(g, 128)), 19.4e6, 1.0));
  CHECK(within_pct(static_cast<double>(lcf_params_total(g, 256)), 53.4e6, 1.0));
  CHECK(within_pct(static_cast<double>(lcf_params_total(g, 512)), 165.5e6, 1.0));
}

TEST_CASE("symmetric pair projector") {
  GeometrySpec g = symmetric_pair();
  CHECK(g.joint_width() == 4096);
  CHECK(lcf_params_per_layer(g, 128) == 923026);
  CHECK(within_pct(static_cast<double>(lcf_params_total(g, 128)), 25.8e6, 1.0));
}

TEST_CASE("pool parameter counts") {
  GeometrySpec g = symmetric_pair();
  CHECK(lcfx_pool_params_per_layer(g) == 2048);
  CHECK(lcfx_pool_params_total(g) == 57344);
  GeometrySpec unit{1, 1, 1, 1, 1};
  CHECK(lcfx_pool_params_per_layer(unit) == 2);
}

TEST_CASE("byte footprints") {
  GeometrySpec g = paper_pair();
  int64_t per_layer = lcf_params_per_layer(g, 128);
  CHECK(adapter_size_mb(19382200) == 39);
  CHECK(adapter_size_mb(per_layer * 28) == 39);
  CHECK(adapter_size_mb(per_layer * 19) == 26);
  CHECK(adapter_size_mb(per_layer * 9) == 13);
  CHECK(adapter_size_mb(per_layer * 6) == 8);
  CHECK(adapter_size_mb(lcf_params_total(g, 64)) == 16);
  CHECK(adapter_size_mb(lcf_params_total(g, 256)) == 107);
  CHECK(adapter_size_mb(lcf_params_total(g, 512)) == 331);
  CHECK(adapter_size_mb(kPublishedC2cTotalParams) == 956);
  CHECK_THROWS_AS(adapter_size_mb(-1), ContractError);
}

TEST_CASE("published baseline ratio") {
  GeometrySpec g = paper_pair();
  double ratio = static_cast<double>(kPublishedC2cParamsPerLayer) /
                 static_cast<double>(lcf_params_per_layer(g, 128));
  CHECK(ratio >= 24.0);
  CHECK(ratio <= 25.0);
}

TEST_CASE("latent width must be even") {
  CHECK_THROWS_AS(lcf_params_per_layer(paper_pair(), 7), ContractError);
}
