#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>

#include <gtest/gtest.h>

#include "rareloss/datasets.hpp"
#include "rareloss/error.hpp"

namespace rareloss {
namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::kInvalidInput;
}

TimeSeriesDataset ramp(std::size_t m) {
  TimeSeriesDataset ds;
  ds.rows = m;
  ds.features = 2;
  ds.channel_names = {"a", "b"};
  for (std::size_t k = 0; k < m; ++k) {
    const auto t = static_cast<double>(k);
    ds.inputs.push_back(std::sin(0.3 * t) + 2.0);
    ds.inputs.push_back(0.5 * t - 7.0);
    ds.target.push_back(std::cos(0.7 * t) * 3.0 + 0.01 * t);
  }
  return ds;
}

TEST(Csv, HandWrittenRoundTrip) {
  const std::string text = "t,u,v,y\n0,1.5,-2,0.25\n0.5,2.5,-3,1e-3\n1,3.5,-4,7\n";
  CsvSchema schema;
  schema.time_column = "t";
  const auto ds = parse_csv(text, schema);
  EXPECT_EQ(ds.rows, 3u);
  EXPECT_EQ(ds.features, 2u);
  EXPECT_EQ(ds.dt, 0.5);
  EXPECT_EQ(ds.t0, 0.0);
  EXPECT_EQ(ds.channel_names, (std::vector<std::string>{"u", "v"}));
  EXPECT_EQ(ds.inputs, (std::vector<double>{1.5, -2, 2.5, -3, 3.5, -4}));
  EXPECT_EQ(ds.target, (std::vector<double>{0.25, 1e-3, 7}));

  const auto again = parse_csv(to_csv(ds), schema);
  EXPECT_EQ(again.inputs, ds.inputs);
  EXPECT_EQ(again.target, ds.target);
  EXPECT_EQ(again.dt, ds.dt);
}

TEST(Csv, SelectedColumnsAndFileProvenance) {
  const auto dir = std::filesystem::temp_directory_path() / "rareloss_csv_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "d.csv";
  std::ofstream(path) << "D,x1,x2,x3\n1,2,3,4\n5,6,7,8\n";
  CsvSchema schema;
  schema.target_column = "D";
  schema.input_columns = {"x3", "x1"};
  const auto ds = load_csv(path, schema);
  EXPECT_EQ(ds.inputs, (std::vector<double>{4, 2, 8, 6}));
  EXPECT_EQ(ds.target, (std::vector<double>{1, 5}));
  EXPECT_EQ(ds.provenance.rfind("fnv1a:", 0), 0u);
  EXPECT_EQ(load_csv(path, schema).provenance, ds.provenance);
}

TEST(Csv, Errors) {
  CsvSchema schema;
  schema.time_column = "t";
  EXPECT_EQ(code_of([&] { parse_csv("t,u,y\n0,1,2\n1,1,2\n3,1,2\n", schema); }),
            ErrorCode::kNonUniformGrid);
  EXPECT_EQ(code_of([&] { parse_csv("t,u,z\n0,1,2\n1,1,2\n", schema); }), ErrorCode::kMissingColumn);
  try {
    parse_csv("t,u,y\n0,1,2\n1,abc,2\n", schema);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kParse);
    const std::string msg = e.what();
    EXPECT_NE(msg.find("row 3"), std::string::npos);
    EXPECT_NE(msg.find("'u'"), std::string::npos);
  }
}

TEST(Normalize, WholeSeriesMoments) {
  const auto ds = ramp(500);
  const auto n = normalize(ds, {0, ds.rows});
  double mean = 0.0, var = 0.0;
  for (double v : n.data.target) mean += v;
  mean /= static_cast<double>(ds.rows);
  for (double v : n.data.target) var += (v - mean) * (v - mean);
  var /= static_cast<double>(ds.rows);
  EXPECT_LT(std::abs(mean), 1e-10);
  EXPECT_NEAR(var, 1.0, 1e-10);
}

TEST(Normalize, RoundTrip) {
  const auto ds = ramp(300);
  const auto n = normalize(ds, {0, 150});
  const auto back = invert_normalization(n.data, n.stats);
  for (std::size_t k = 0; k < ds.rows; ++k) {
    EXPECT_NEAR(back.target[k], ds.target[k], 1e-12);
    EXPECT_NEAR(n.stats.denormalize_target(n.data.target[k]), ds.target[k], 1e-12);
  }
  for (std::size_t k = 0; k < ds.inputs.size(); ++k) EXPECT_NEAR(back.inputs[k], ds.inputs[k], 1e-12);
  const auto stats = NormalizationStats::from_text(n.stats.to_text());
  EXPECT_EQ(stats.target_mean, n.stats.target_mean);
  EXPECT_EQ(stats.input_std, n.stats.input_std);
}

TEST(Normalize, ConstantChannelIsNamed) {
  auto ds = ramp(50);
  for (std::size_t k = 0; k < ds.rows; ++k) ds.inputs[2 * k + 1] = 4.0;
  try {
    normalize(ds, {0, ds.rows});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDegenerateChannel);
    EXPECT_NE(std::string(e.what()).find("'b'"), std::string::npos);
  }
}

TEST(Windows, CountingExample) {
  const auto ds = ramp(10);
  const auto w = make_windows(ds, 3, 2);
  ASSERT_EQ(w.size(), 6u);
  EXPECT_EQ(w.window_begin_row(0), 0u);
  EXPECT_EQ(w.target_row(0), 4u);
  EXPECT_EQ(w.target(0), ds.target[4]);
  const auto win = w.window(0);
  ASSERT_EQ(win.size(), 3u * 2u);
  for (std::size_t k = 0; k < win.size(); ++k) EXPECT_EQ(win[k], ds.inputs[k]);
  EXPECT_EQ(w.target_row(5), 9u);
}

TEST(Windows, SingleSampleEdgeAndTooShort) {
  const auto ds = ramp(10);
  EXPECT_EQ(make_windows(ds, 3, 7).size(), 1u);
  EXPECT_EQ(code_of([&] { make_windows(ds, 3, 8); }), ErrorCode::kSeriesTooShort);
}

TEST(Windows, IndexLawAudit) {
  for (std::size_t m : {20u, 57u, 200u}) {
    const auto ds = ramp(m);
    for (std::size_t h : {1u, 4u, 9u}) {
      for (std::size_t tau : {1u, 3u, 10u}) {
        const auto w = make_windows(ds, h, tau);
        ASSERT_EQ(w.size(), m - h - tau + 1);
        std::vector<double> rebuilt(m, std::nan(""));
        for (std::size_t i = 0; i < w.size(); ++i) {
          rebuilt[w.target_row(i)] = w.target(i);
          const auto win = w.window(i);
          for (std::size_t r = 0; r < h; ++r) {
            for (std::size_t f = 0; f < 2; ++f) EXPECT_EQ(win[r * 2 + f], ds.input(i + r, f));
          }
        }
        for (std::size_t row = h - 1 + tau; row < m; ++row) EXPECT_EQ(rebuilt[row], ds.target[row]);
        if (w.size() >= 5) {
          const auto part = w.slice(2, 3);
          EXPECT_EQ(part.target_row(0), w.target_row(2));
          EXPECT_EQ(part.target(2), w.target(4));
        }
        EXPECT_THROW(w.slice(w.size() - 1, 2), Error);
      }
    }
  }
}

double excess_kurtosis(const std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  double m2 = 0.0, m4 = 0.0;
  for (double x : v) {
    const double d = (x - mean) * (x - mean);
    m2 += d;
    m4 += d * d;
  }
  m2 /= n;
  m4 /= n;
  return m4 / (m2 * m2) - 3.0;
}

TEST(Synth, NoBurstsIsGaussian) {
  SynthParams p;
  p.m = 100000;
  p.burst_amp = 0.0;
  const auto r = synth_bursts(p);
  EXPECT_LT(std::abs(excess_kurtosis(r.data.target)), 0.1);
}

TEST(Synth, DefaultExtremeFraction) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    SynthParams p;
    p.seed = seed;
    const auto r = synth_bursts(p);
    std::size_t n = 0;
    for (double v : r.data.target) n += std::abs(v) > 4.0 * p.noise_std;
    const double frac = static_cast<double>(n) / static_cast<double>(p.m);
    EXPECT_GE(frac, 0.005) << "seed " << seed;
    EXPECT_LE(frac, 0.03) << "seed " << seed;
  }
}

TEST(Synth, DeterministicPerSeed) {
  SynthParams p;
  p.m = 5000;
  const auto a = synth_bursts(p);
  const auto b = synth_bursts(p);
  EXPECT_EQ(a.data.target, b.data.target);
  EXPECT_EQ(a.data.inputs, b.data.inputs);
  EXPECT_EQ(to_csv(a.data), to_csv(b.data));
  p.seed = 2;
  EXPECT_NE(synth_bursts(p).data.target, a.data.target);
}

TEST(Synth, CrossingsRecoverableFromLatent) {
  SynthParams p;
  p.seed = 5;
  const auto r = synth_bursts(p);
  const double level = p.trigger_level * p.ou_sigma / std::sqrt(2.0 * p.ou_theta);
  std::vector<std::size_t> found;
  for (std::size_t k = 1; k < r.latent.size(); ++k) {
    if (r.latent[k - 1] < level && r.latent[k] >= level) found.push_back(k);
  }
  EXPECT_EQ(found, r.crossings);
  ASSERT_EQ(r.burst_centers.size(), r.crossings.size());
  for (std::size_t i = 0; i < found.size(); ++i) {
    EXPECT_EQ(r.burst_centers[i], found[i] + p.precursor_lead_steps);
  }
  EXPECT_GT(found.size(), 50u);
}

TEST(Synth, RejectsBadParams) {
  SynthParams p;
  p.ou_theta = 0.0;
  EXPECT_THROW(synth_bursts(p), Error);
  p = {};
  p.burst_width = -1.0;
  EXPECT_THROW(synth_bursts(p), Error);
  EXPECT_THROW(SynthParams::from_json_text("{\"bogus\": 1}"), Error);
  p = {};
  p.seed = 17;
  const auto back = SynthParams::from_json_text(p.to_text());
  EXPECT_EQ(back.to_text(), p.to_text());
}

TEST(Synth, TrainStatsKeepLaterSegmentsNearUnit) {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    SynthParams p;
    p.seed = seed;
    const auto r = synth_bursts(p);
    const std::size_t train_end = p.m / 2, val_end = train_end + p.m / 10;
    const auto n = normalize(r.data, {0, train_end});
    for (RowRange seg : {RowRange{train_end, val_end}, RowRange{val_end, p.m}}) {
      double mean = 0.0, var = 0.0;
      for (std::size_t k = seg.begin; k < seg.end; ++k) mean += n.data.target[k];
      mean /= static_cast<double>(seg.size());
      for (std::size_t k = seg.begin; k < seg.end; ++k) {
        var += (n.data.target[k] - mean) * (n.data.target[k] - mean);
      }
      var /= static_cast<double>(seg.size());
      EXPECT_LT(std::abs(mean), 0.5);
      EXPECT_GE(var, 0.25);
      EXPECT_LE(var, 4.0);
    }
  }
}

}  // namespace
}  // namespace rareloss
