#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace nncfl::data {

enum class Area : std::uint8_t { Residential = 0, Park, Avenue, Highway, Tunnel };

inline constexpr std::size_t kAreaCount = 5;
inline constexpr std::array<std::string_view, kAreaCount> kAreaNames = {
    "Residential", "Park", "Avenue", "Highway", "Tunnel"};

// Training sample counts per area segment of the reference deployment; the
// default shard ratios are these normalised by their sum.
inline constexpr std::array<double, kAreaCount> kReferenceShardCounts = {28017, 33487, 19747,
                                                                        10390, 475};

using Ratios = std::array<double, kAreaCount>;
Ratios default_ratios();

struct CellularRecord {
    std::uint64_t id = 0;
    Area area = Area::Residential;
    int mcs = 0;               // 0..28
    double tx_power = 0.0;     // dBm
    double frequency = 0.0;    // MHz
    double rsrq = 0.0;         // PCell_RSRQ_max, dB
    double rssi = 0.0;         // dBm
    double snr = 0.0;          // dB
    double ping = 0.0;         // ms
    double jitter = 0.0;       // ms
    double gps_lat = 0.0;
    double gps_lon = 0.0;

    friend bool operator==(const CellularRecord&, const CellularRecord&) = default;
};

// Serialised field order.
const std::vector<std::string>& feature_names();

// Feature names followed by the area labels: every multi-character token a
// serialised record can contain.
std::vector<std::string> vocabulary_words();

// Record `index` of the stream identified by `seed`; independent of every
// other index, so ranges can be generated in any order.
CellularRecord generate_record(std::uint64_t seed, std::uint64_t index);

// Records 0..n-1. Throws ArgumentError for n == 0.
std::vector<CellularRecord> generate(std::uint64_t seed, std::size_t n);

// "name = value, name = value, ..." in feature_names() order.
std::string serialize(const CellularRecord& record);

struct FederatedSplit {
    std::array<std::vector<CellularRecord>, kAreaCount> shards;
    std::vector<CellularRecord> test;
};

// Largest-remainder apportionment of `total` items; ties favour the lower index.
std::array<std::size_t, kAreaCount> shard_sizes(std::size_t total, const Ratios& ratios);

// Draws round(test_fraction * n) records uniformly for the test set, then
// fills shard k (area k) up to its apportioned size with records of area k;
// any shortfall is topped up from the other areas' surplus in id order.
FederatedSplit split(std::span<const CellularRecord> records, const Ratios& ratios,
                     double test_fraction, std::uint64_t seed);

struct CorpusManifest {
    std::uint64_t seed = 0;
    std::size_t records = 0;
    Ratios ratios = default_ratios();
    double test_fraction = 0.1;
};

// Writes `<corpus>` (one serialised record per line) and the JSON sidecar
// `<corpus>.manifest.json`.
void write_corpus(const std::filesystem::path& corpus, const CorpusManifest& manifest);
CorpusManifest load_manifest(const std::filesystem::path& path);
std::filesystem::path manifest_path_for(const std::filesystem::path& corpus);

} // namespace nncfl::data
