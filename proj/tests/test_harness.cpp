#include "nncfl/byte_io.hpp"
#include "nncfl/experiment.hpp"

#include "doctest.h"

#include "json.hpp"

#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>

using namespace nncfl;
using namespace nncfl::harness;

namespace {

ExperimentConfig tiny() {
    ExperimentConfig c;
    c.seed = 3;
    c.model = {8, 1, 2, 0, 160, 12};
    c.rounds = 2;
    c.clients = 3;
    c.local_epochs = 0.05;
    c.batch_size = 2;
    c.lr = 1e-2;
    c.records = 400;
    c.eval_records = 20;
    c.qp = -20;
    return c;
}

Summary fake_summary(const ExperimentConfig& c, double top1, double ppl) {
    Summary s;
    s.config = c;
    s.final_top1 = top1;
    s.final_perplexity = ppl;
    return s;
}

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, ',');) {
        out.push_back(f);
    }
    return out;
}

} // namespace

TEST_CASE("config text round trip") {
    ExperimentConfig c = tiny();
    c.lr = 3e-4;
    c.sparsity = 0.6;
    c.weighting = fl::Weighting::uniform;
    c.out_dir = "/tmp/x";
    c.ratios = {0.5, 0.25, 0.125, 0.0625, 0.0625};
    const std::string text = to_text(c);
    const auto back = parse_config(text);
    CHECK(back == c);
    CHECK(to_text(back) == text);
    for (const auto& key : config_keys()) {
        CHECK(text.find("\n" + key + " = ") != std::string::npos);
    }
    CHECK(parse_config("") == ExperimentConfig{});
    CHECK(parse_config("# comment\n\nrounds = 7\n").rounds == 7);
}

TEST_CASE("config errors") {
    CHECK_THROWS_AS(parse_config("bogus = 1\n"), ArgumentError);
    CHECK_THROWS_AS(parse_config("rounds = 1\nrounds = 2\n"), ArgumentError);
    CHECK_THROWS_AS(parse_config("rounds = many\n"), ArgumentError);
    CHECK_THROWS_AS(parse_config("rounds\n"), ArgumentError);
    CHECK_THROWS_AS(parse_config("bypass_codec = maybe\n"), ArgumentError);
    try {
        parse_config("seed = 1\nlr = x\n");
        FAIL("expected an error");
    } catch (const ArgumentError& e) {
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }
    ExperimentConfig c;
    c.clients = 6;
    CHECK_THROWS_AS(c.validate(), ArgumentError);
    c = ExperimentConfig{};
    c.sparsity = 1.0;
    CHECK_THROWS_AS(c.validate(), ArgumentError);
    c = ExperimentConfig{};
    c.lr = 0.0;
    CHECK_THROWS_AS(c.validate(), ArgumentError);
}

TEST_CASE("model spec") {
    lm::ModelConfig m{64, 4, 4, 0, 160, 172};
    apply_model_spec(m, "dim=32,heads=2");
    CHECK(m.dim == 32);
    CHECK(m.n_heads == 2);
    CHECK(m.n_layers == 4);
    CHECK_THROWS_AS(apply_model_spec(m, "width=3"), ArgumentError);
    CHECK_THROWS_AS(apply_model_spec(m, "dim"), ArgumentError);
    CHECK_THROWS_AS(apply_model_spec(m, "dim=x"), ArgumentError);
}

TEST_CASE("baseline pairing") {
    const auto c = tiny();
    const auto b = baseline_of(c);
    CHECK(b.bypass_codec);
    CHECK(paired(c, b));
    auto other = c;
    other.qp = -10;
    other.sparsity = 0.8;
    CHECK(paired(c, other));
    other.lr = 1e-3;
    CHECK_FALSE(paired(c, other));
    other = c;
    other.rounds = 3;
    CHECK_FALSE(paired(c, other));
}

TEST_CASE("transparency verdicts") {
    const auto c = tiny();
    const auto b = baseline_of(c);
    auto v = report_transparency(fake_summary(c, 74.82, 1.31), fake_summary(b, 75.0, 1.30));
    CHECK(v.transparent);
    CHECK(v.delta.top1 == doctest::Approx(-0.18));
    CHECK(v.delta.perplexity == doctest::Approx(0.01));
    CHECK_FALSE(report_transparency(fake_summary(c, 72.0, 1.30), fake_summary(b, 75.0, 1.30)).transparent);
    CHECK(report_transparency(fake_summary(c, 75.03, 1.30), fake_summary(b, 75.0, 1.30)).transparent);
    CHECK_FALSE(report_transparency(fake_summary(c, 75.0, 1.35), fake_summary(b, 75.0, 1.30)).transparent);
    auto unpaired = b;
    unpaired.seed = 99;
    CHECK_THROWS_AS(report_transparency(fake_summary(c, 1, 1), fake_summary(unpaired, 1, 1)), ArgumentError);
}

TEST_CASE("data preparation") {
    const auto c = tiny();
    const auto d = prepare_data(c);
    CHECK(d.shards.size() == 3);
    CHECK(d.test.size() == 20);
    CHECK(d.test_records == 40);
    const auto sizes = data::shard_sizes(360, c.ratios);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(d.shards[i].size() == sizes[i]);
        for (const auto& s : d.shards[i]) {
            REQUIRE(s.front() == tok::kBos);
            REQUIRE(s.back() == tok::kEos);
        }
    }
    CHECK(resolved_model(c, d).vocab_size == static_cast<int>(d.vocab.size()));
}

TEST_CASE("metrics are deterministic and the summary matches the columns") {
    auto c = tiny();
    c.sparsity = 0.5;
    const auto a = run_federation(c);
    const auto b = run_federation(c);
    const std::string csv = metrics_csv(a.rounds, c.clients);
    CHECK(csv == metrics_csv(b.rounds, c.clients));
    CHECK(a.final_weights == b.final_weights);

    const auto header = csv_header(c.clients);
    CHECK(std::set<std::string>(header.begin(), header.end()).size() == header.size());
    for (const char* col : {"round", "up_raw", "up_compressed", "down_raw", "down_compressed", "top1_percent",
                            "perplexity", "measured_sparsity", "c2_up_compressed"}) {
        CHECK(std::find(header.begin(), header.end(), col) != header.end());
    }

    std::stringstream ss(csv);
    std::string line;
    std::getline(ss, line);
    CHECK(split_line(line) == header);
    const auto col = [&](const char* name) {
        return static_cast<std::size_t>(std::find(header.begin(), header.end(), name) - header.begin());
    };
    double comp = 0, raw = 0;
    int rows = 0;
    while (std::getline(ss, line)) {
        const auto f = split_line(line);
        REQUIRE(f.size() == header.size());
        comp += std::stod(f[col("up_compressed")]) + std::stod(f[col("down_compressed")]);
        raw += std::stod(f[col("up_raw")]) + std::stod(f[col("down_raw")]);
        ++rows;
    }
    CHECK(rows == c.rounds);
    CHECK(std::abs(100.0 * comp / raw - a.summary.ratio_percent) < 0.01);
    CHECK(a.summary.final_perplexity == doctest::Approx(a.rounds.back().perplexity));
    CHECK(a.summary.measured_sparsity >= 0.5);
}

TEST_CASE("a bypass run compared with itself shows no degradation") {
    auto c = tiny();
    c.bypass_codec = true;
    const auto a = run_federation(c);
    const auto b = run_federation(baseline_of(c));
    const auto v = report_transparency(a.summary, b.summary);
    CHECK(v.transparent);
    CHECK(v.delta.top1 == 0.0);
    CHECK(v.delta.perplexity == 0.0);
    // raw payloads plus headers
    CHECK(a.summary.ratio_percent >= 100.0);
}

TEST_CASE("experiment output files") {
    auto c = tiny();
    c.rounds = 1;
    const auto dir = std::filesystem::temp_directory_path() / "nncfl_harness_out";
    std::filesystem::remove_all(dir);
    c.out_dir = dir.string();
    c.put_dir = (dir / "put").string();
    const auto r = run_experiment(c);
    REQUIRE(r.baseline.has_value());
    REQUIRE(r.verdict.has_value());
    for (const char* f : {"config.txt", "metrics.csv", "baseline_metrics.csv", "timings.csv", "summary.json",
                          "put/manifest.json"}) {
        CHECK(std::filesystem::exists(dir / f));
    }
    CHECK(load_config(dir / "config.txt") == c);
    const auto bytes = read_file(dir / "summary.json");
    const auto j = nlohmann::json::parse(bytes.begin(), bytes.end());
    CHECK(j.contains("transparent"));
    const auto tree = fl::ParameterUpdateTree::load(dir / "put");
    CHECK(tree.resolve(r.run.latest_aggregate) == r.run.final_weights);
    std::filesystem::remove_all(dir);
}

TEST_CASE("sweep covers the grid and records failures") {
    auto c = tiny();
    c.rounds = 1;
    const std::vector<int> qps{-22, -18};
    const std::vector<double> sps{0.0, 0.6};
    const std::vector<double> lrs{1e-2, 1e30};
    c.local_epochs = 1.0;
    const auto rows = sweep(c, qps, sps, lrs);
    REQUIRE(rows.size() == 8);
    CHECK(rows[0].lr == 1e-2);
    CHECK(rows[0].qp == -22);
    CHECK(rows[1].sparsity == 0.6);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(rows[i].ok);
    }
    for (std::size_t i = 4; i < 8; ++i) {
        CHECK_FALSE(rows[i].ok);
        CHECK_FALSE(rows[i].error.empty());
    }
    const auto csv = sweep_csv(rows);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 9);
}
