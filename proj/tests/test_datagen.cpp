#include "nncfl/byte_io.hpp"
#include "nncfl/datagen.hpp"
#include "nncfl/model.hpp"
#include "nncfl/tokenizer.hpp"

#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>
#include <unordered_set>

using namespace nncfl;
using namespace nncfl::data;

namespace {

// Independent largest-remainder apportionment.
std::array<std::size_t, kAreaCount> apportion(std::size_t total, const std::array<double, kAreaCount>& w) {
    const double sum = std::accumulate(w.begin(), w.end(), 0.0);
    std::array<std::size_t, kAreaCount> out{};
    std::array<double, kAreaCount> rem{};
    std::size_t used = 0;
    for (std::size_t i = 0; i < kAreaCount; ++i) {
        const double exact = static_cast<double>(total) * w[i] / sum;
        out[i] = static_cast<std::size_t>(std::floor(exact));
        rem[i] = exact - std::floor(exact);
        used += out[i];
    }
    for (; used < total; ++used) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < kAreaCount; ++i) {
            if (rem[i] > rem[best]) {
                best = i;
            }
        }
        ++out[best];
        rem[best] = -1.0;
    }
    return out;
}

} // namespace

TEST_CASE("generation is deterministic and index-addressable") {
    const auto a = generate(7, 500);
    const auto b = generate(7, 500);
    CHECK(a == b);
    CHECK(generate_record(7, 321) == a[321]);
    CHECK_FALSE(generate(8, 500) == a);
    CHECK_THROWS_AS(generate(7, 0), ArgumentError);
}

TEST_CASE("values stay inside their physical ranges") {
    for (const auto& r : generate(1, 20000)) {
        REQUIRE(r.mcs >= 0);
        REQUIRE(r.mcs <= 28);
        REQUIRE(r.snr >= -20.0);
        REQUIRE(r.snr <= 40.0);
        REQUIRE(r.tx_power >= -40.0);
        REQUIRE(r.tx_power <= 23.0);
        REQUIRE(r.rsrq >= -20.0);
        REQUIRE(r.rsrq <= -3.0);
        REQUIRE(r.rssi >= -120.0);
        REQUIRE(r.rssi <= -25.0);
        REQUIRE(r.ping >= 1.0);
        REQUIRE(r.ping <= 1000.0);
        REQUIRE(r.jitter >= 0.0);
        REQUIRE(std::set<double>{806.0, 1815.0, 2132.6, 2655.0}.contains(r.frequency));
        REQUIRE(std::abs(r.gps_lat - 52.5) < 0.1);
        REQUIRE(std::abs(r.gps_lon - 13.35) < 0.2);
    }
}

TEST_CASE("tunnel ping exceeds park ping on average") {
    double tunnel = 0, park = 0;
    std::size_t nt = 0, np = 0;
    for (const auto& r : generate(2, 10000)) {
        if (r.area == Area::Tunnel) {
            tunnel += r.ping;
            ++nt;
        } else if (r.area == Area::Park) {
            park += r.ping;
            ++np;
        }
    }
    REQUIRE(nt > 0);
    REQUIRE(np > 0);
    CHECK(tunnel / static_cast<double>(nt) > park / static_cast<double>(np));
}

TEST_CASE("serialization format") {
    CellularRecord r;
    r.area = Area::Park;
    r.mcs = 17;
    r.tx_power = 3.5;
    r.frequency = 2132.6;
    r.rsrq = -7.445;
    r.rssi = -60.25;
    r.snr = 12.0;
    r.ping = 25.125;
    r.jitter = 3.0;
    r.gps_lat = 52.5141;
    r.gps_lon = 13.3502;
    const std::string s = serialize(r);
    CHECK(s ==
          "area = Park, MCS = 17, Tx_Power = 3.500, frequency = 2132.6, PCell_RSRQ_max = -7.445, "
          "RSSI = -60.250, SNR = 12.000, ping = 25.125, jitter = 3.000, gps_lat = 52.5141, "
          "gps_lon = 13.3502");
    CHECK(s.find("PCell_RSRQ_max = -7.445") != std::string::npos);
    for (const auto& rec : generate(4, 200)) {
        const auto t = serialize(rec);
        CHECK(t.find("MCS") < t.find("ping"));
        CHECK(t.find("-0.000") == std::string::npos);
    }
}

TEST_CASE("serialization is injective over generated records") {
    std::unordered_set<std::string> seen;
    for (std::uint64_t i = 0; i < 100000; ++i) {
        REQUIRE(seen.insert(serialize(generate_record(5, i))).second);
    }
}

TEST_CASE("default ratios come from the reference shard counts") {
    const auto r = default_ratios();
    CHECK(std::accumulate(r.begin(), r.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r[0] == doctest::Approx(28017.0 / 92116.0));
    CHECK(r[4] == doctest::Approx(475.0 / 92116.0));
}

TEST_CASE("shard sizes") {
    const auto sizes = shard_sizes(9000, default_ratios());
    CHECK(sizes == apportion(9000, kReferenceShardCounts));
    CHECK(sizes == std::array<std::size_t, kAreaCount>{2737, 3272, 1929, 1015, 47});
    for (std::size_t i = 0; i < kAreaCount; ++i) {
        CHECK(std::abs(static_cast<double>(sizes[i]) - 9000 * default_ratios()[i]) <= 1.0);
    }
    Ratios bad = default_ratios();
    bad[0] += 0.01;
    CHECK_THROWS_AS(shard_sizes(100, bad), ArgumentError);
}

TEST_CASE("split: sizes, proportions and disjointness") {
    const auto records = generate(9, 10000);
    const auto s = split(records, default_ratios(), 0.1, 9);
    CHECK(s.test.size() == 1000);
    const auto want = shard_sizes(9000, default_ratios());
    std::set<std::uint64_t> ids;
    for (const auto& r : s.test) {
        CHECK(ids.insert(r.id).second);
    }
    for (std::size_t k = 0; k < kAreaCount; ++k) {
        CHECK(s.shards[k].size() == want[k]);
        for (const auto& r : s.shards[k]) {
            CHECK(ids.insert(r.id).second);
        }
    }
    CHECK(ids.size() == records.size());
    CHECK_THROWS_AS(split(records, default_ratios(), 0.0, 9), ArgumentError);
    CHECK_THROWS_AS(split(records, default_ratios(), 1.0, 9), ArgumentError);
}

TEST_CASE("shards are keyed by area where the area has enough records") {
    const auto records = generate(10, 5000);
    const auto s = split(records, default_ratios(), 0.1, 10);
    std::size_t own = 0, total = 0;
    for (std::size_t k = 0; k < kAreaCount; ++k) {
        for (const auto& r : s.shards[k]) {
            own += static_cast<std::size_t>(r.area) == k ? 1 : 0;
            ++total;
        }
    }
    CHECK(static_cast<double>(own) / static_cast<double>(total) > 0.95);
}

TEST_CASE("corpus files are byte-identical across regenerations") {
    const auto dir = std::filesystem::temp_directory_path() / "nncfl_datagen_test";
    std::filesystem::create_directories(dir);
    CorpusManifest m;
    m.seed = 77;
    m.records = 300;
    write_corpus(dir / "a.txt", m);
    const auto loaded = load_manifest(manifest_path_for(dir / "a.txt"));
    CHECK(loaded.seed == 77);
    CHECK(loaded.records == 300);
    CHECK(loaded.ratios == m.ratios);
    write_corpus(dir / "b.txt", loaded);
    CHECK(read_file(dir / "a.txt") == read_file(dir / "b.txt"));
    const auto bytes = read_file(dir / "a.txt");
    CHECK(std::count(bytes.begin(), bytes.end(), '\n') == 300);
    std::filesystem::remove_all(dir);
}

TEST_CASE("a one-layer model learns the generated language") {
    const auto words = vocabulary_words();
    const auto vocab = tok::Vocabulary::build(words);
    const auto records = generate(11, 2050);  // last 50 held out
    std::vector<lm::TokenSequence> seqs;
    for (const auto& r : records) {
        auto s = vocab.encode(serialize(r));
        s.insert(s.begin(), tok::kBos);
        s.push_back(tok::kEos);
        seqs.push_back(std::move(s));
    }
    const lm::ModelConfig c{32, 1, 4, static_cast<int>(vocab.size()), 160, 64};
    Rng rng(11, 1);
    auto w = lm::init_weights(c, rng);
    auto state = lm::make_adam_state(w);
    const lm::AdamConfig adam{3e-3f, 0.9f, 0.95f, 1e-8f, 0.0f};
    for (std::size_t step = 0; step < 500; ++step) {
        std::vector<lm::TokenSequence> batch;
        for (std::size_t i = 0; i < 4; ++i) {
            batch.push_back(seqs[(step * 4 + i) % 2000]);
        }
        auto lg = lm::loss_and_grads(c, w, lm::make_batch(batch, 160));
        lm::adamw_step(w, lg.grads, state, adam);
    }
    const std::span<const lm::TokenSequence> held_out(seqs.data() + 2000, 50);
    const auto ev = lm::evaluate(c, w, held_out);
    const double chance = 100.0 / static_cast<double>(vocab.size());
    MESSAGE("top1 " << ev.top1_percent << "% vs chance " << chance << "%");
    CHECK(ev.top1_percent > 3.0 * chance);
}
