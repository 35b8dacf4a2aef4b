// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "cape/data.hpp"
#include "cape/epi_sim.hpp"

using namespace cape;
using namespace cape::data;

namespace {

LoadResult parse(const std::string& text) {
    std::istringstream in(text);
    return parse_csv(in, "test.csv");
}

double mean_of(const std::vector<double>& v, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        s += v[i];
    }
    return s / static_cast<double>(n);
}

}  // namespace

TEST(LoadCsv, ThreeRowFile) {
    auto r = parse(
        "disease_id,region_id,timestamp,value,r0_lower,r0_upper\n"
        "flu,us,2020-01-03,3,1.2,1.8\n"
        "flu,us,2020-01-01,1,1.2,1.8\n"
        "flu,us,2020-01-02,2,1.2,1.8\n");
    ASSERT_EQ(r.records.size(), 1u);
    const auto& rec = r.records[0];
    EXPECT_EQ(rec.values, (std::vector<double>{1, 2, 3}));
    EXPECT_EQ(rec.timestamps[1] - rec.timestamps[0], 1);
    EXPECT_DOUBLE_EQ(rec.r0_range.lower, 1.2);
    EXPECT_DOUBLE_EQ(rec.r0_range.upper, 1.8);
    EXPECT_EQ(r.dropped_rows, 0u);
}

TEST(LoadCsv, DefaultsReproductionRangeWithoutColumns) {
    auto r = parse("disease_id,region_id,timestamp,value\nx,a,2020-01-01,1\nx,a,2020-01-02,2\n");
    ASSERT_EQ(r.records.size(), 1u);
    EXPECT_EQ(r.records[0].r0_range.lower, 0.0);
    EXPECT_EQ(r.records[0].r0_range.upper, 20.0);
}

TEST(LoadCsv, DuplicateTimestampRejected) {
    EXPECT_THROW(parse("disease_id,region_id,timestamp,value\nx,a,2020-01-01,1\nx,a,2020-01-01,2\n"), FormatError);
}

TEST(LoadCsv, NanRowDroppedAndCounted) {
    auto r = parse(
        "disease_id,region_id,timestamp,value\n"
        "x,a,2020-01-01,1\nx,a,2020-01-02,NaN\nx,a,2020-01-03,3\nx,a,2020-01-04,4\n");
    ASSERT_EQ(r.records.size(), 1u);
    EXPECT_EQ(r.records[0].size(), 3u);
    EXPECT_EQ(r.dropped_rows, 1u);
    ASSERT_FALSE(r.warnings.empty());
    EXPECT_EQ(r.warnings.back(), "1 dropped");
}

TEST(LoadCsv, MalformedRowReportsLineNumber) {
    try {
        parse("disease_id,region_id,timestamp,value\nx,a,2020-01-01,1\nx,a,2020-01-02,abc\n");
        FAIL() << "expected FormatError";
    } catch (const FormatError& e) {
        EXPECT_NE(std::string(e.what()).find("test.csv:3"), std::string::npos) << e.what();
    }
    EXPECT_THROW(parse("disease_id,region_id,timestamp,value\nx,a,2020-13-01,1\n"), FormatError);
    EXPECT_THROW(parse("disease_id,region_id,timestamp,value\nx,a,2020-01-01\n"), FormatError);
    EXPECT_THROW(parse("disease_id,region_id,timestamp,value\nx,a,2020-01-01,-4\n"), FormatError);
    EXPECT_THROW(parse("region_id,timestamp,value\na,2020-01-01,1\n"), FormatError);
}

TEST(LoadCsv, EmptySeriesSkippedWithWarning) {
    auto r = parse(
        "disease_id,region_id,timestamp,value\n"
        "x,a,2020-01-01,nan\nx,b,2020-01-01,1\nx,b,2020-01-02,2\n");
    ASSERT_EQ(r.records.size(), 1u);
    EXPECT_EQ(r.records[0].region_id, "b");
    EXPECT_GE(r.warnings.size(), 1u);
}

TEST(LoadCsv, GroupsByDiseaseAndRegion) {
    auto r = parse(
        "disease_id,region_id,timestamp,value\n"
        "x,a,2020-01-01,1\ny,a,2020-01-01,5\nx,b,2020-01-01,7\nx,a,2020-01-02,2\n");
    ASSERT_EQ(r.records.size(), 3u);
    EXPECT_EQ(r.records[0].values, (std::vector<double>{1, 2}));
}

TEST(WriteCsv, RoundTripsExactly) {
    sim::CorpusSpec spec;
    spec.n_series = 4;
    spec.length = 30;
    auto recs = sim::records_of(sim::make_corpus(1, spec));
    std::stringstream buf;
    write_csv(buf, recs);
    auto back = parse_csv(buf);
    ASSERT_EQ(back.records.size(), recs.size());
    for (std::size_t k = 0; k < recs.size(); ++k) {
        EXPECT_EQ(back.records[k].values, recs[k].values);
        EXPECT_EQ(back.records[k].timestamps, recs[k].timestamps);
        EXPECT_EQ(back.records[k].r0_range.lower, recs[k].r0_range.lower);
        EXPECT_EQ(back.records[k].r0_range.upper, recs[k].r0_range.upper);
    }
}

TEST(Dates, RoundTrip) {
    EXPECT_EQ(parse_date("1970-01-01"), 0);
    EXPECT_EQ(parse_date("2000-01-01"), kSyntheticEpochDay);
    EXPECT_EQ(format_date(kSyntheticEpochDay + 60), "2000-03-01");
    EXPECT_FALSE(parse_date("2001-02-29").has_value());
    EXPECT_FALSE(parse_date("20010101").has_value());
}

TEST(Zscore, Definition) {
    TimeSeriesRecord r;
    r.values = {1, 2, 3};
    r.timestamps = {0, 1, 2};
    auto n = zscore_normalize(r, 1.0);
    EXPECT_NEAR(mean_of(n.values, 3), 0.0, 1e-12);
    double ss = 0.0;
    for (double v : n.values) {
        ss += v * v;
    }
    EXPECT_NEAR(std::sqrt(ss / 3.0), 1.0, 1e-12);
}

TEST(Zscore, RoundTrip) {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        TimeSeriesRecord r;
        for (int i = 0; i < 40; ++i) {
            r.values.push_back(rng.uniform(0.0, 1e4));
            r.timestamps.push_back(i);
        }
        auto back = denormalize(zscore_normalize(r));
        for (std::size_t i = 0; i < r.size(); ++i) {
            EXPECT_NEAR(back.values[i], r.values[i], 1e-9 * std::max(1.0, std::abs(r.values[i])));
        }
    }
}

TEST(Zscore, StatisticsFromTrainSplitOnly) {
    TimeSeriesRecord r;
    for (int i = 0; i < 100; ++i) {
        r.values.push_back(static_cast<double>(i));
        r.timestamps.push_back(i);
    }
    auto n = zscore_normalize(r, 0.6);
    EXPECT_NEAR(mean_of(n.values, 60), 0.0, 1e-9);
    double ss = 0.0;
    for (std::size_t i = 0; i < 60; ++i) {
        ss += n.values[i] * n.values[i];
    }
    EXPECT_NEAR(std::sqrt(ss / 60.0), 1.0, 1e-9);
    EXPECT_GT(mean_of(std::vector<double>(n.values.begin() + 60, n.values.end()), 40), 1.0);
}

TEST(Zscore, ConstantSeriesRejected) {
    TimeSeriesRecord r;
    r.values = {5, 5, 5, 5};
    r.timestamps = {0, 1, 2, 3};
    EXPECT_THROW(zscore_normalize(r, 1.0), ValidationError);
}

TEST(Windows, CountExamples) {
    std::vector<double> v40(40, 1.0);
    std::vector<double> v41(41, 1.0);
    EXPECT_EQ(make_windows(v40, 36, 4, 1).size(), 1u);
    EXPECT_EQ(make_windows(v41, 36, 4, 1).size(), 2u);
    EXPECT_TRUE(make_windows(std::vector<double>(39, 1.0), 36, 4, 1).empty());
}

TEST(Windows, CountFormulaOnRandomShapes) {
    Rng rng(8);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t T = 1 + rng.index(40);
        const std::size_t h = 1 + rng.index(10);
        const std::size_t stride = 1 + rng.index(7);
        const std::size_t len = T + h + rng.index(80);
        std::vector<double> v(len);
        for (std::size_t i = 0; i < len; ++i) {
            v[i] = static_cast<double>(i);
        }
        auto w = make_windows(v, T, h, stride);
        ASSERT_EQ(w.size(), (len - T - h) / stride + 1);
        for (std::size_t k = 0; k < w.size(); ++k) {
            EXPECT_EQ(w[k].start, k * stride);
            EXPECT_EQ(w[k].x.front(), static_cast<double>(k * stride));
            EXPECT_EQ(w[k].y.front(), static_cast<double>(k * stride + T));
        }
    }
}

TEST(Windows, NeverStraddleRecords) {
    sim::CorpusSpec spec;
    spec.n_series = 5;
    auto recs = sim::records_of(sim::make_corpus(2, spec));
    for (std::size_t k = 0; k < recs.size(); ++k) {
        for (const auto& w : make_windows(recs[k], 36, 4, 3, k)) {
            EXPECT_EQ(w.record, k);
            for (std::size_t i = 0; i < w.x.size(); ++i) {
                EXPECT_EQ(w.x[i], recs[k].values[w.start + i]);
            }
        }
    }
}

TEST(Windows, SplitTargetsStayInsideTheirSegment) {
    std::vector<double> v(200);
    for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = static_cast<double>(i);
    }
    auto s = split_windows(v, 36, 4, 1);
    const auto b = split_bounds(200);
    EXPECT_EQ(b.train_end, 120u);
    EXPECT_EQ(b.val_end, 140u);
    ASSERT_FALSE(s.train.empty());
    ASSERT_FALSE(s.val.empty());
    ASSERT_FALSE(s.test.empty());
    for (const auto& w : s.train) {
        EXPECT_LE(w.start + 40, 120u);
    }
    for (const auto& w : s.val) {
        EXPECT_GE(w.y.front(), 120.0);
        EXPECT_LT(w.y.back(), 140.0);
    }
    for (const auto& w : s.test) {
        EXPECT_GE(w.y.front(), 140.0);
    }
}

TEST(Patches, ReassemblyIsExact) {
    Rng rng(1);
    std::vector<double> x(36);
    for (double& v : x) {
        v = rng.normal();
    }
    auto p = patchify(x, 4);
    EXPECT_EQ(p.count(), 9u);
    EXPECT_EQ(unpatchify(p), x);
    EXPECT_EQ(p.at(2, 1), x[9]);
    EXPECT_THROW(patchify(x, 5), ShapeError);
}

TEST(Patches, MaskCountThirtyPercentOfNine) {
    std::vector<double> x(36, 1.0);
    Rng rng(2);
    auto m = mask_patches(patchify(x, 4), 0.3, rng);
    EXPECT_EQ(m.masked(), 3u);
    for (std::size_t c = 0; c < m.count(); ++c) {
        for (std::size_t j = 0; j < 4; ++j) {
            EXPECT_EQ(m.at(c, j), m.mask[c] ? 0.0 : 1.0);
        }
    }
}

TEST(Patches, MaskAtLeastOnePatch) {
    std::vector<double> x(8, 1.0);
    Rng rng(3);
    EXPECT_EQ(mask_patches(patchify(x, 4), 0.1, rng).masked(), 1u);
    EXPECT_THROW(mask_patches(patchify(x, 4), 0.0, rng), ValidationError);
    EXPECT_THROW(mask_patches(patchify(x, 4), 1.0, rng), ValidationError);
}

TEST(Patches, MaskDeterministicPerSeed) {
    std::vector<double> x(36, 1.0);
    Rng a(77);
    Rng b(77);
    EXPECT_EQ(mask_patches(patchify(x, 4), 0.3, a).mask, mask_patches(patchify(x, 4), 0.3, b).mask);
}

TEST(Views, IdenticalOffsetsOverlapEverywhere) {
    std::vector<double> v(60, 0.0);
    auto p = views_from_offsets(v, 36, 4, 10, 10);
    EXPECT_EQ(p.omega_a.size(), 9u);
    EXPECT_EQ(p.omega_a, p.omega_b);
    EXPECT_DOUBLE_EQ(p.overlap_fraction(), 1.0);
}

TEST(Views, OnePatchOverlap) {
    std::vector<double> v(80, 0.0);
    auto p = views_from_offsets(v, 36, 4, 0, 32);
    ASSERT_EQ(p.omega_a.size(), 1u);
    EXPECT_EQ(p.omega_a[0], 8u);
    EXPECT_EQ(p.omega_b[0], 0u);
}

TEST(Views, RandomCropsRespectOverlapAndAbsoluteTime) {
    std::vector<double> v(80);
    for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = static_cast<double>(i);
    }
    Rng rng(5);
    std::set<std::size_t> sizes;
    for (int trial = 0; trial < 500; ++trial) {
        auto p = make_views(v, 36, 4, rng);
        ASSERT_TRUE(p.has_value());
        EXPECT_GE(p->overlap_fraction(), 0.25);
        EXPECT_LE(p->overlap_fraction(), 1.0);
        ASSERT_FALSE(p->omega_a.empty());
        sizes.insert(p->omega_a.size());
        for (std::size_t i = 0; i < p->omega_a.size(); ++i) {
            for (std::size_t j = 0; j < 4; ++j) {
                EXPECT_EQ(p->view_a[p->omega_a[i] * 4 + j], p->view_b[p->omega_b[i] * 4 + j]);
            }
        }
    }
    EXPECT_GT(sizes.size(), 3u);
    EXPECT_FALSE(make_views(std::vector<double>(53, 0.0), 36, 4, rng).has_value());
}
