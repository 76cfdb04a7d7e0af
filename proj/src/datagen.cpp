#include "nncfl/datagen.hpp"

#include "nncfl/errors.hpp"
#include "nncfl/rng.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace nncfl::data {

namespace {

// Per-area generator parameters, indexed by Area.
struct AreaProfile {
    double mcs_mean;
    double snr_base;
    double rssi_base;
    double ping_base;
    double lat;
    double lon;
};

constexpr std::array<AreaProfile, kAreaCount> kProfiles = {{
    {16.0, 12.0, -68.0, 28.0, 52.5200, 13.3900},  // Residential
    {18.0, 16.0, -62.0, 24.0, 52.5140, 13.3500},  // Park
    {14.0, 9.0, -72.0, 34.0, 52.5070, 13.3200},   // Avenue
    {20.0, 14.0, -66.0, 30.0, 52.5300, 13.2900},  // Highway
    {6.0, -2.0, -95.0, 85.0, 52.4980, 13.4100},   // Tunnel
}};

constexpr std::array<double, 4> kBandsMHz = {806.0, 1815.0, 2132.6, 2655.0};

double round_to(double x, int decimals) {
    const double scale = std::pow(10.0, decimals);
    const double r = std::round(x * scale) / scale;
    return r == 0.0 ? 0.0 : r;  // no "-0.000"
}

double clamp(double x, double lo, double hi) { return std::min(hi, std::max(lo, x)); }

void append_field(std::string& out, std::string_view name, double value, int decimals) {
    if (!out.empty()) {
        out += ", ";
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, value);
    out.append(name);
    out += " = ";
    out += buf;
}

} // namespace

Ratios default_ratios() {
    const double total =
        std::accumulate(kReferenceShardCounts.begin(), kReferenceShardCounts.end(), 0.0);
    Ratios r{};
    for (std::size_t i = 0; i < kAreaCount; ++i) {
        r[i] = kReferenceShardCounts[i] / total;
    }
    return r;
}

const std::vector<std::string>& feature_names() {
    static const std::vector<std::string> names = {
        "area", "MCS", "Tx_Power", "frequency", "PCell_RSRQ_max", "RSSI",
        "SNR",  "ping", "jitter",  "gps_lat",   "gps_lon"};
    return names;
}

std::vector<std::string> vocabulary_words() {
    std::vector<std::string> words = feature_names();
    for (const auto name : kAreaNames) {
        words.emplace_back(name);
    }
    return words;
}

CellularRecord generate_record(std::uint64_t seed, std::uint64_t index) {
    Rng rng(seed, streams::kRecordBase + index);
    CellularRecord r;
    r.id = index;

    // Area ~ categorical(default ratios).
    const Ratios ratios = default_ratios();
    const double u = rng.uniform01();
    double cum = 0.0;
    std::size_t area = kAreaCount - 1;
    for (std::size_t i = 0; i < kAreaCount; ++i) {
        cum += ratios[i];
        if (u < cum) {
            area = i;
            break;
        }
    }
    r.area = static_cast<Area>(area);
    const AreaProfile& p = kProfiles[area];

    r.frequency = r.area == Area::Tunnel ? kBandsMHz[0] : kBandsMHz[rng.below(kBandsMHz.size())];
    const double band_offset = r.frequency - kBandsMHz[0];

    r.mcs = static_cast<int>(clamp(std::round(rng.normal(p.mcs_mean, 3.0)), 0.0, 28.0));
    const double snr = p.snr_base + 0.5 * (r.mcs - p.mcs_mean) - 0.002 * band_offset +
                       rng.normal(0.0, 1.0);
    r.snr = round_to(clamp(snr, -20.0, 40.0), 3);
    r.tx_power = round_to(clamp(23.0 - 0.6 * r.snr + rng.normal(0.0, 1.0), -40.0, 23.0), 3);
    r.rsrq = round_to(clamp(-12.0 + 0.3 * r.snr + rng.normal(0.0, 0.4), -20.0, -3.0), 3);
    r.rssi = round_to(
        clamp(p.rssi_base + 0.8 * r.snr - 0.004 * band_offset + rng.normal(0.0, 1.5), -120.0, -25.0),
        3);
    const double ping =
        p.ping_base + 0.004 * band_offset + 0.6 * (28 - r.mcs) + rng.normal(0.0, 2.0);
    r.ping = round_to(clamp(ping, 1.0, 1000.0), 3);
    r.jitter = round_to(clamp(0.12 * r.ping + std::abs(rng.normal(0.0, 0.5)), 0.0, 100.0), 3);
    r.gps_lat = round_to(p.lat + rng.normal(0.0, 0.004), 4);
    r.gps_lon = round_to(p.lon + rng.normal(0.0, 0.006), 4);
    r.frequency = round_to(r.frequency, 1);
    return r;
}

std::vector<CellularRecord> generate(std::uint64_t seed, std::size_t n) {
    if (n == 0) {
        throw ArgumentError("generate: n must be >= 1");
    }
    std::vector<CellularRecord> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(generate_record(seed, i));
    }
    return out;
}

std::string serialize(const CellularRecord& r) {
    std::string out = "area = ";
    out += kAreaNames[static_cast<std::size_t>(r.area)];
    append_field(out, "MCS", r.mcs, 0);
    append_field(out, "Tx_Power", r.tx_power, 3);
    append_field(out, "frequency", r.frequency, 1);
    append_field(out, "PCell_RSRQ_max", r.rsrq, 3);
    append_field(out, "RSSI", r.rssi, 3);
    append_field(out, "SNR", r.snr, 3);
    append_field(out, "ping", r.ping, 3);
    append_field(out, "jitter", r.jitter, 3);
    append_field(out, "gps_lat", r.gps_lat, 4);
    append_field(out, "gps_lon", r.gps_lon, 4);
    return out;
}

std::array<std::size_t, kAreaCount> shard_sizes(std::size_t total, const Ratios& ratios) {
    double sum = 0.0;
    for (const double r : ratios) {
        if (!(r >= 0.0)) {
            throw ArgumentError("shard ratios must be non-negative");
        }
        sum += r;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
        throw ArgumentError("shard ratios sum to " + std::to_string(sum) + ", expected 1");
    }
    std::array<std::size_t, kAreaCount> sizes{};
    std::array<double, kAreaCount> remainder{};
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < kAreaCount; ++i) {
        const double exact = ratios[i] * static_cast<double>(total);
        sizes[i] = static_cast<std::size_t>(std::floor(exact));
        remainder[i] = exact - static_cast<double>(sizes[i]);
        assigned += sizes[i];
    }
    std::array<std::size_t, kAreaCount> order{};
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
    for (std::size_t k = 0; assigned < total; ++k) {
        sizes[order[k % kAreaCount]] += 1;
        ++assigned;
    }
    return sizes;
}

FederatedSplit split(std::span<const CellularRecord> records, const Ratios& ratios,
                     double test_fraction, std::uint64_t seed) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
        throw ArgumentError("test_fraction must lie in (0, 1)");
    }
    const std::size_t n = records.size();
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
    const auto sizes = shard_sizes(n - n_test, ratios);

    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    Rng rng(seed, streams::kSplit);
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = rng.below(static_cast<std::uint32_t>(i));
        std::swap(perm[i - 1], perm[j]);
    }
    std::vector<bool> is_test(n, false);
    for (std::size_t i = 0; i < n_test; ++i) {
        is_test[perm[i]] = true;
    }

    FederatedSplit out;
    std::vector<std::size_t> leftovers;
    std::array<std::size_t, kAreaCount> filled{};
    for (std::size_t i = 0; i < n; ++i) {
        if (is_test[i]) {
            out.test.push_back(records[i]);
            continue;
        }
        const auto a = static_cast<std::size_t>(records[i].area);
        if (filled[a] < sizes[a]) {
            out.shards[a].push_back(records[i]);
            ++filled[a];
        } else {
            leftovers.push_back(i);
        }
    }
    std::size_t next = 0;
    for (std::size_t a = 0; a < kAreaCount; ++a) {
        while (filled[a] < sizes[a]) {
            out.shards[a].push_back(records[leftovers[next++]]);
            ++filled[a];
        }
    }
    return out;
}

std::filesystem::path manifest_path_for(const std::filesystem::path& corpus) {
    return std::filesystem::path(corpus.string() + ".manifest.json");
}

void write_corpus(const std::filesystem::path& corpus, const CorpusManifest& m) {
    const auto records = generate(m.seed, m.records);
    {
        std::ofstream out(corpus, std::ios::binary);
        if (!out) {
            throw IoError("cannot write corpus " + corpus.string());
        }
        for (const auto& r : records) {
            out << serialize(r) << '\n';
        }
    }
    nlohmann::ordered_json j;
    j["generator"] = "nncfl-synthetic-v1";
    j["seed"] = m.seed;
    j["records"] = m.records;
    j["ratios"] = m.ratios;
    j["test_fraction"] = m.test_fraction;
    j["feature_order"] = feature_names();
    std::ofstream out(manifest_path_for(corpus), std::ios::binary);
    if (!out) {
        throw IoError("cannot write manifest for " + corpus.string());
    }
    out << j.dump(2) << '\n';
}

CorpusManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open manifest " + path.string());
    }
    try {
        const auto j = nlohmann::json::parse(in);
        if (j.at("generator").get<std::string>() != "nncfl-synthetic-v1") {
            throw FormatError("manifest " + path.string() + ": unknown generator");
        }
        CorpusManifest m;
        m.seed = j.at("seed").get<std::uint64_t>();
        m.records = j.at("records").get<std::size_t>();
        m.ratios = j.at("ratios").get<Ratios>();
        m.test_fraction = j.at("test_fraction").get<double>();
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest " + path.string() + ": " + e.what());
    }
}

} // namespace nncfl::data
