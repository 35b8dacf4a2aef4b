// SPDX-License-Identifier: Apache-2.0
//
// Series ingestion, normalization, windowing, patching, masking and
// overlapping-crop view generation.
#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cape/error.hpp"
#include "cape/random.hpp"

namespace cape::data {

/// 2000-01-01 as days since 1970-01-01; first timestamp of synthetic series.
inline constexpr std::int64_t kSyntheticEpochDay = 10957;

inline constexpr double kDefaultR0Lower = 0.0;
inline constexpr double kDefaultR0Upper = 20.0;

struct R0Range {
    double lower = kDefaultR0Lower;
    double upper = kDefaultR0Upper;
};

struct NormState {
    double mean = 0.0;
    double std = 1.0;
};

struct TimeSeriesRecord {
    std::string disease_id;
    std::string region_id;
    std::vector<std::int64_t> timestamps;  ///< days since 1970-01-01, strictly increasing
    std::vector<double> values;
    R0Range r0_range;
    std::optional<NormState> norm;

    std::size_t size() const { return values.size(); }

    void validate() const {
        if (timestamps.size() != values.size()) {
            throw ValidationError("record " + region_id + ": timestamps and values differ in length");
        }
        for (std::size_t i = 1; i < timestamps.size(); ++i) {
            if (timestamps[i] <= timestamps[i - 1]) {
                throw ValidationError("record " + region_id + ": timestamps not strictly increasing");
            }
        }
        if (!(r0_range.lower <= r0_range.upper)) {
            throw ValidationError("record " + region_id + ": r0 lower bound exceeds upper bound");
        }
        if (norm && !(norm->std > 0)) {
            throw ValidationError("record " + region_id + ": normalization std must be positive");
        }
    }
};

// ---------------------------------------------------------------- dates

/// Parses YYYY-MM-DD into days since 1970-01-01.
inline std::optional<std::int64_t> parse_date(std::string_view s) {
    if (s.size() != 10 || s[4] != '-' || s[7] != '-') {
        return std::nullopt;
    }
    int y = 0;
    unsigned m = 0;
    unsigned d = 0;
    auto num = [&](std::size_t b, std::size_t e, auto& out) {
        auto r = std::from_chars(s.data() + b, s.data() + e, out);
        return r.ec == std::errc{} && r.ptr == s.data() + e;
    };
    if (!num(0, 4, y) || !num(5, 7, m) || !num(8, 10, d)) {
        return std::nullopt;
    }
    const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
    if (!ymd.ok()) {
        return std::nullopt;
    }
    return std::chrono::sys_days{ymd}.time_since_epoch().count();
}

inline std::string format_date(std::int64_t days) {
    const std::chrono::year_month_day ymd{std::chrono::sys_days{std::chrono::days{days}}};
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
    return buf;
}

/// Shortest decimal form that parses back to the same double.
inline std::string format_double(double v) {
    char buf[32];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

// ---------------------------------------------------------------- CSV

struct LoadResult {
    std::vector<TimeSeriesRecord> records;
    std::size_t dropped_rows = 0;  ///< rows with a missing or NaN value
    std::vector<std::string> warnings;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) {
        s.remove_prefix(1);
    }
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
        s.remove_suffix(1);
    }
    return s;
}

inline std::vector<std::string_view> split_fields(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
        if (i == line.size() || line[i] == ',') {
            out.push_back(trim(line.substr(start, i - start)));
            start = i + 1;
        }
    }
    return out;
}

inline bool is_missing(std::string_view s) {
    if (s.empty()) {
        return true;
    }
    std::string lower(s);
    std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    return lower == "nan" || lower == "na" || lower == "null";
}

inline std::optional<double> parse_real(std::string_view s) {
    double v = 0.0;
    auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) {
        return std::nullopt;
    }
    return v;
}

}  // namespace detail

/// Parses the `disease_id,region_id,timestamp,value[,r0_lower,r0_upper]`
/// schema (columns located by header name). Records are grouped by
/// (disease_id, region_id), ordered by first appearance, and sorted by time.
inline LoadResult parse_csv(std::istream& in, const std::string& source = "<csv>") {
    std::string line;
    std::size_t lineno = 0;
    auto fail = [&](const std::string& what) {
        throw FormatError(source + ":" + std::to_string(lineno) + ": " + what);
    };
    if (!std::getline(in, line)) {
        lineno = 1;
        fail("missing header");
    }
    ++lineno;
    if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) {
        line.erase(0, 3);  // UTF-8 BOM
    }
    const auto header = detail::split_fields(line);
    std::map<std::string, std::size_t, std::less<>> col;
    for (std::size_t i = 0; i < header.size(); ++i) {
        col.emplace(std::string(header[i]), i);
    }
    for (const char* req : {"disease_id", "region_id", "timestamp", "value"}) {
        if (!col.count(req)) {
            fail(std::string("header lacks column '") + req + "'");
        }
    }
    const bool has_r0 = col.count("r0_lower") && col.count("r0_upper");
    if (!has_r0 && (col.count("r0_lower") || col.count("r0_upper"))) {
        fail("r0_lower and r0_upper must appear together");
    }

    struct Row {
        std::int64_t t;
        double v;
        std::size_t line;
    };
    struct Group {
        std::string disease, region;
        R0Range r0;
        std::vector<Row> rows;
    };
    std::vector<Group> groups;
    std::map<std::pair<std::string, std::string>, std::size_t> index;
    LoadResult result;

    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim(line).empty()) {
            continue;
        }
        const auto f = detail::split_fields(line);
        if (f.size() != header.size()) {
            fail("expected " + std::to_string(header.size()) + " fields, found " + std::to_string(f.size()));
        }
        std::string disease(f[col.find("disease_id")->second]);
        std::string region(f[col.find("region_id")->second]);
        if (disease.empty() || region.empty()) {
            fail("empty disease_id or region_id");
        }
        const auto ts = parse_date(f[col.find("timestamp")->second]);
        if (!ts) {
            fail("timestamp is not an ISO-8601 date (YYYY-MM-DD)");
        }
        R0Range r0;
        if (has_r0) {
            const auto lo_s = f[col.find("r0_lower")->second];
            const auto hi_s = f[col.find("r0_upper")->second];
            if (!lo_s.empty() || !hi_s.empty()) {
                const auto lo = detail::parse_real(lo_s);
                const auto hi = detail::parse_real(hi_s);
                if (!lo || !hi || !(*lo <= *hi)) {
                    fail("r0_lower/r0_upper must be reals with lower <= upper");
                }
                r0 = {*lo, *hi};
            }
        }
        auto key = std::make_pair(disease, region);
        auto it = index.find(key);
        if (it == index.end()) {
            it = index.emplace(key, groups.size()).first;
            groups.push_back(Group{disease, region, r0, {}});
        }
        Group& g = groups[it->second];

        const auto vs = f[col.find("value")->second];
        if (detail::is_missing(vs)) {
            ++result.dropped_rows;
            continue;
        }
        const auto v = detail::parse_real(vs);
        if (!v) {
            fail("value '" + std::string(vs) + "' is not a real number");
        }
        if (std::isnan(*v)) {
            ++result.dropped_rows;
            continue;
        }
        if (!std::isfinite(*v) || *v < 0) {
            fail("value must be a finite nonnegative real");
        }
        g.rows.push_back(Row{*ts, *v, lineno});
    }

    for (Group& g : groups) {
        if (g.rows.empty()) {
            result.warnings.push_back("series " + g.disease + "/" + g.region + " has no valid rows; skipped");
            continue;
        }
        std::stable_sort(g.rows.begin(), g.rows.end(), [](const Row& a, const Row& b) { return a.t < b.t; });
        TimeSeriesRecord rec;
        rec.disease_id = g.disease;
        rec.region_id = g.region;
        rec.r0_range = g.r0;
        for (std::size_t i = 0; i < g.rows.size(); ++i) {
            if (i > 0 && g.rows[i].t == g.rows[i - 1].t) {
                lineno = g.rows[i].line;
                fail("duplicate timestamp " + format_date(g.rows[i].t) + " in series " + g.disease + "/" + g.region);
            }
            rec.timestamps.push_back(g.rows[i].t);
            rec.values.push_back(g.rows[i].v);
        }
        result.records.push_back(std::move(rec));
    }
    if (result.dropped_rows > 0) {
        result.warnings.push_back(std::to_string(result.dropped_rows) + " dropped");
    }
    return result;
}

inline LoadResult load_csv(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open " + path);
    }
    return parse_csv(in, path);
}

/// Writes raw (unnormalized) values in the schema read by parse_csv.
inline void write_csv(std::ostream& out, const std::vector<TimeSeriesRecord>& records) {
    out << "disease_id,region_id,timestamp,value,r0_lower,r0_upper\n";
    for (const auto& r : records) {
        for (std::size_t i = 0; i < r.size(); ++i) {
            out << r.disease_id << ',' << r.region_id << ',' << format_date(r.timestamps[i]) << ','
                << format_double(r.values[i]) << ',' << format_double(r.r0_range.lower) << ','
                << format_double(r.r0_range.upper) << '\n';
        }
    }
}

inline void write_csv(const std::string& path, const std::vector<TimeSeriesRecord>& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw FormatError("cannot write " + path);
    }
    write_csv(out, records);
    if (!out) {
        throw FormatError("write failed for " + path);
    }
}

// ---------------------------------------------------------------- splits

struct SplitFractions {
    double train = 0.6;
    double val = 0.1;
    double test = 0.3;

    void validate() const {
        if (!(train > 0 && val >= 0 && test >= 0) || std::abs(train + val + test - 1.0) > 1e-9) {
            throw ValidationError("split fractions must be nonnegative, train > 0, and sum to 1");
        }
    }
};

/// Chronological boundaries: train [0, train_end), val [train_end, val_end),
/// test [val_end, n).
struct SplitBounds {
    std::size_t train_end = 0;
    std::size_t val_end = 0;
    std::size_t n = 0;
};

inline SplitBounds split_bounds(std::size_t n, const SplitFractions& f = {}) {
    f.validate();
    SplitBounds b;
    b.n = n;
    b.train_end = static_cast<std::size_t>(std::floor(f.train * static_cast<double>(n)));
    b.val_end = std::min(n, static_cast<std::size_t>(std::floor((f.train + f.val) * static_cast<double>(n))));
    return b;
}

// ---------------------------------------------------------------- normalization

/// Mean and population standard deviation of a nonconstant series (length >= 2).
inline NormState fit_zscore(const double* v, std::size_t n) {
    if (n < 2) {
        throw ValidationError("z-score needs at least 2 values");
    }
    const double mean = std::accumulate(v, v + n, 0.0) / static_cast<double>(n);
    double ss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ss += (v[i] - mean) * (v[i] - mean);
    }
    const double sd = std::sqrt(ss / static_cast<double>(n));
    if (!(sd > 1e-12 * std::max(1.0, std::abs(mean)))) {
        throw ValidationError("z-score of a constant series is undefined");
    }
    return {mean, sd};
}

inline std::vector<double> apply_zscore(const std::vector<double>& v, const NormState& s) {
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = (v[i] - s.mean) / s.std;
    }
    return out;
}

inline std::vector<double> invert_zscore(const std::vector<double>& v, const NormState& s) {
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = v[i] * s.std + s.mean;
    }
    return out;
}

/// Normalizes the whole series with statistics from its first
/// `train_fraction` (chronologically). A record that is already normalized is
/// rejected.
inline TimeSeriesRecord zscore_normalize(const TimeSeriesRecord& rec, double train_fraction = 0.6) {
    if (rec.norm) {
        throw ValidationError("record " + rec.region_id + " is already normalized");
    }
    if (!(train_fraction > 0 && train_fraction <= 1)) {
        throw ValidationError("train_fraction must lie in (0, 1]");
    }
    const auto n_fit = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(rec.size())));
    TimeSeriesRecord out = rec;
    try {
        out.norm = fit_zscore(rec.values.data(), n_fit);
    } catch (const ValidationError& e) {
        throw ValidationError("record " + rec.disease_id + "/" + rec.region_id + ": " + e.what());
    }
    out.values = apply_zscore(rec.values, *out.norm);
    return out;
}

inline TimeSeriesRecord denormalize(const TimeSeriesRecord& rec) {
    if (!rec.norm) {
        return rec;
    }
    TimeSeriesRecord out = rec;
    out.values = invert_zscore(rec.values, *rec.norm);
    out.norm.reset();
    return out;
}

// ---------------------------------------------------------------- windows

struct WindowPair {
    std::vector<double> x;  ///< lookback, length T
    std::vector<double> y;  ///< target, length h
    std::size_t record = 0;
    std::size_t start = 0;  ///< index of x[0] in the source series
};

/// floor((len - T - h) / stride) + 1 windows in chronological order, or none
/// when the series is shorter than T + h.
inline std::vector<WindowPair> make_windows(const std::vector<double>& values, std::size_t T, std::size_t h,
                                            std::size_t stride, std::size_t record = 0) {
    if (T == 0 || stride == 0) {
        throw ValidationError("make_windows: T and stride must be positive");
    }
    std::vector<WindowPair> out;
    if (values.size() < T + h) {
        return out;
    }
    for (std::size_t s = 0; s + T + h <= values.size(); s += stride) {
        WindowPair w;
        w.x.assign(values.begin() + static_cast<std::ptrdiff_t>(s), values.begin() + static_cast<std::ptrdiff_t>(s + T));
        w.y.assign(values.begin() + static_cast<std::ptrdiff_t>(s + T),
                   values.begin() + static_cast<std::ptrdiff_t>(s + T + h));
        w.record = record;
        w.start = s;
        out.push_back(std::move(w));
    }
    return out;
}

inline std::vector<WindowPair> make_windows(const TimeSeriesRecord& rec, std::size_t T, std::size_t h,
                                            std::size_t stride, std::size_t record = 0) {
    return make_windows(rec.values, T, h, stride, record);
}

/// Windows whose targets lie entirely in [target_begin, target_end); the
/// lookback may extend before target_begin but not before index 0.
inline std::vector<WindowPair> make_windows_in(const std::vector<double>& values, std::size_t T, std::size_t h,
                                               std::size_t stride, std::size_t target_begin, std::size_t target_end,
                                               std::size_t record = 0) {
    std::vector<WindowPair> out;
    target_end = std::min(target_end, values.size());
    std::size_t s = target_begin > T ? target_begin - T : 0;
    for (; s + T + h <= target_end; s += stride) {
        if (s + T < target_begin) {
            continue;
        }
        WindowPair w;
        w.x.assign(values.begin() + static_cast<std::ptrdiff_t>(s), values.begin() + static_cast<std::ptrdiff_t>(s + T));
        w.y.assign(values.begin() + static_cast<std::ptrdiff_t>(s + T),
                   values.begin() + static_cast<std::ptrdiff_t>(s + T + h));
        w.record = record;
        w.start = s;
        out.push_back(std::move(w));
    }
    return out;
}

struct SplitWindows {
    std::vector<WindowPair> train, val, test;
};

/// Chronological train/val/test windows for one record.
inline SplitWindows split_windows(const std::vector<double>& values, std::size_t T, std::size_t h, std::size_t stride,
                                  const SplitFractions& f = {}, std::size_t record = 0) {
    const SplitBounds b = split_bounds(values.size(), f);
    SplitWindows w;
    w.train = make_windows_in(values, T, h, stride, 0, b.train_end, record);
    w.val = make_windows_in(values, T, h, stride, b.train_end, b.val_end, record);
    w.test = make_windows_in(values, T, h, stride, b.val_end, b.n, record);
    return w;
}

// ---------------------------------------------------------------- patches

struct PatchSet {
    std::size_t patch_len = 0;
    std::vector<double> values;  ///< C * patch_len, patch-major
    std::vector<bool> mask;      ///< true = masked

    std::size_t count() const { return mask.size(); }
    std::size_t masked() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true)); }
    double at(std::size_t patch, std::size_t j) const { return values[patch * patch_len + j]; }
};

inline PatchSet patchify(const std::vector<double>& x, std::size_t patch_len) {
    if (patch_len == 0 || x.empty() || x.size() % patch_len != 0) {
        throw ShapeError("patchify: length " + std::to_string(x.size()) + " is not a positive multiple of patch_len " +
                         std::to_string(patch_len));
    }
    PatchSet p;
    p.patch_len = patch_len;
    p.values = x;
    p.mask.assign(x.size() / patch_len, false);
    return p;
}

inline std::vector<double> unpatchify(const PatchSet& p) { return p.values; }

/// Number of patches masked for ratio r over C patches: round(r * C), at least 1.
inline std::size_t mask_count(std::size_t patches, double ratio) {
    const auto k = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(patches)));
    return std::clamp<std::size_t>(k, 1, patches);
}

/// Masks mask_count(C, ratio) distinct patches chosen uniformly and zero-fills them.
inline PatchSet mask_patches(const PatchSet& in, double ratio, Rng& rng) {
    if (!(ratio > 0 && ratio < 1)) {
        throw ValidationError("mask ratio must lie in (0, 1)");
    }
    PatchSet out = in;
    const std::size_t c = in.count();
    std::vector<std::size_t> order(c);
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t k = mask_count(c, ratio);
    for (std::size_t i = 0; i < k; ++i) {
        std::swap(order[i], order[i + rng.index(c - i)]);
        const std::size_t p = order[i];
        out.mask[p] = true;
        std::fill_n(out.values.begin() + static_cast<std::ptrdiff_t>(p * in.patch_len), in.patch_len, 0.0);
    }
    return out;
}

/// Masks exactly the final patch (zero-shot forecasting input).
inline PatchSet mask_last_patch(const PatchSet& in) {
    PatchSet out = in;
    const std::size_t p = in.count() - 1;
    out.mask[p] = true;
    std::fill_n(out.values.begin() + static_cast<std::ptrdiff_t>(p * in.patch_len), in.patch_len, 0.0);
    return out;
}

// ---------------------------------------------------------------- views

/// Two crops of length T from one series. Offsets differ by a whole number of
/// patches, so patch omega_a[i] of view_a covers the same absolute time as
/// patch omega_b[i] of view_b.
struct ViewPair {
    std::vector<double> view_a, view_b;
    std::size_t offset_a = 0, offset_b = 0;
    std::size_t patch_len = 0;
    std::vector<std::size_t> omega_a, omega_b;

    double overlap_fraction() const {
        return static_cast<double>(omega_a.size() * patch_len) / static_cast<double>(view_a.size());
    }
};

inline ViewPair views_from_offsets(const std::vector<double>& values, std::size_t T, std::size_t patch_len,
                                   std::size_t offset_a, std::size_t offset_b) {
    if (patch_len == 0 || T % patch_len != 0) {
        throw ShapeError("views: T must be a multiple of patch_len");
    }
    if (std::max(offset_a, offset_b) + T > values.size()) {
        throw ValidationError("views: crop exceeds series length");
    }
    const std::size_t shift = offset_a > offset_b ? offset_a - offset_b : offset_b - offset_a;
    if (shift % patch_len != 0) {
        throw ValidationError("views: crop offsets must differ by a multiple of patch_len");
    }
    const std::size_t c = T / patch_len;
    const std::size_t s = shift / patch_len;
    if (s >= c) {
        throw ValidationError("views: crops do not overlap");
    }
    ViewPair v;
    v.patch_len = patch_len;
    v.offset_a = offset_a;
    v.offset_b = offset_b;
    v.view_a.assign(values.begin() + static_cast<std::ptrdiff_t>(offset_a),
                    values.begin() + static_cast<std::ptrdiff_t>(offset_a + T));
    v.view_b.assign(values.begin() + static_cast<std::ptrdiff_t>(offset_b),
                    values.begin() + static_cast<std::ptrdiff_t>(offset_b + T));
    for (std::size_t i = 0; i + s < c; ++i) {
        // the later crop's patch i lines up with the earlier crop's patch i + s
        if (offset_a >= offset_b) {
            v.omega_a.push_back(i);
            v.omega_b.push_back(i + s);
        } else {
            v.omega_a.push_back(i + s);
            v.omega_b.push_back(i);
        }
    }
    return v;
}

/// Largest patch shift whose overlap still covers at least a quarter of T.
inline std::size_t max_view_shift(std::size_t T, std::size_t patch_len) {
    const std::size_t c = T / patch_len;
    const std::size_t min_overlap = (c + 3) / 4;
    return c - std::max<std::size_t>(min_overlap, 1);
}

/// Crops with a given patch shift at a random position; nullopt when the
/// series cannot hold both crops.
inline std::optional<ViewPair> make_views_with_shift(const std::vector<double>& values, std::size_t T,
                                                     std::size_t patch_len, std::size_t shift_patches, Rng& rng) {
    const std::size_t span = T + shift_patches * patch_len;
    if (values.size() < span || shift_patches > max_view_shift(T, patch_len)) {
        return std::nullopt;
    }
    const std::size_t start = rng.index(values.size() - span + 1);
    const bool a_first = rng.index(2) == 0;
    const std::size_t later = start + shift_patches * patch_len;
    return views_from_offsets(values, T, patch_len, a_first ? start : later, a_first ? later : start);
}

/// Random crops with overlap in [0.25, 1] of T; nullopt for series shorter
/// than 1.5 T.
inline std::optional<ViewPair> make_views(const std::vector<double>& values, std::size_t T, std::size_t patch_len,
                                          Rng& rng) {
    if (patch_len == 0 || T % patch_len != 0) {
        throw ShapeError("views: T must be a multiple of patch_len");
    }
    if (2 * values.size() < 3 * T) {
        return std::nullopt;
    }
    const std::size_t room = (values.size() - T) / patch_len;
    const std::size_t shift = rng.index(std::min(room, max_view_shift(T, patch_len)) + 1);
    return make_views_with_shift(values, T, patch_len, shift, rng);
}

}  // namespace cape::data
