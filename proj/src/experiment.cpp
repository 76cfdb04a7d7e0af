#include "nncfl/experiment.hpp"

#include "nncfl/byte_io.hpp"

#include "json.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

namespace nncfl::harness {

namespace {

// Shortest text that parses back to the same double.
std::string fmt_double(double v) {
    char buf[40];
    const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

std::string fmt_metric(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) {
        s.remove_prefix(1);
    }
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
        s.remove_suffix(1);
    }
    return s;
}

template <typename T>
T parse_number(std::string_view s, std::string_view key) {
    s = trim(s);
    T v{};
    const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || end != s.data() + s.size() || s.empty()) {
        throw ArgumentError("config: bad value '" + std::string(s) + "' for " + std::string(key));
    }
    return v;
}

bool parse_bool(std::string_view s, std::string_view key) {
    s = trim(s);
    if (s == "true" || s == "1") {
        return true;
    }
    if (s == "false" || s == "0") {
        return false;
    }
    throw ArgumentError("config: " + std::string(key) + " expects true/false, got '" +
                        std::string(s) + "'");
}

std::string write_bool(bool b) { return b ? "true" : "false"; }

// Accessor table: one entry per key, in file order.
struct Field {
    std::string key;
    std::function<std::string(const ExperimentConfig&)> get;
    std::function<void(ExperimentConfig&, std::string_view)> set;
};

template <typename T>
Field int_field(std::string key, T ExperimentConfig::*member) {
    return {key, [member](const ExperimentConfig& c) { return std::to_string(c.*member); },
            [member, key](ExperimentConfig& c, std::string_view v) { c.*member = parse_number<T>(v, key); }};
}

Field model_field(std::string key, int lm::ModelConfig::*member) {
    return {key, [member](const ExperimentConfig& c) { return std::to_string(c.model.*member); },
            [member, key](ExperimentConfig& c, std::string_view v) {
                c.model.*member = parse_number<int>(v, key);
            }};
}

Field double_field(std::string key, double ExperimentConfig::*member) {
    return {key, [member](const ExperimentConfig& c) { return fmt_double(c.*member); },
            [member, key](ExperimentConfig& c, std::string_view v) {
                c.*member = parse_number<double>(v, key);
            }};
}

Field bool_field(std::string key, bool ExperimentConfig::*member) {
    return {key, [member](const ExperimentConfig& c) { return write_bool(c.*member); },
            [member, key](ExperimentConfig& c, std::string_view v) { c.*member = parse_bool(v, key); }};
}

Field string_field(std::string key, std::string ExperimentConfig::*member) {
    return {key, [member](const ExperimentConfig& c) { return c.*member; },
            [member](ExperimentConfig& c, std::string_view v) { c.*member = std::string(trim(v)); }};
}

const std::vector<Field>& fields() {
    static const std::vector<Field> table = [] {
        std::vector<Field> f;
        f.push_back(int_field("seed", &ExperimentConfig::seed));
        f.push_back(model_field("model.dim", &lm::ModelConfig::dim));
        f.push_back(model_field("model.layers", &lm::ModelConfig::n_layers));
        f.push_back(model_field("model.heads", &lm::ModelConfig::n_heads));
        f.push_back(model_field("model.vocab", &lm::ModelConfig::vocab_size));
        f.push_back(model_field("model.seq", &lm::ModelConfig::seq_len));
        f.push_back(model_field("model.ffn", &lm::ModelConfig::ffn_hidden));
        f.push_back(int_field("rounds", &ExperimentConfig::rounds));
        f.push_back(int_field("clients", &ExperimentConfig::clients));
        f.push_back(double_field("local_epochs", &ExperimentConfig::local_epochs));
        f.push_back(int_field("batch_size", &ExperimentConfig::batch_size));
        f.push_back(double_field("lr", &ExperimentConfig::lr));
        f.push_back(double_field("weight_decay", &ExperimentConfig::weight_decay));
        f.push_back(int_field("qp", &ExperimentConfig::qp));
        f.push_back(int_field("qp_density", &ExperimentConfig::qp_density));
        f.push_back(double_field("sparsity", &ExperimentConfig::sparsity));
        f.push_back(bool_field("bypass_codec", &ExperimentConfig::bypass_codec));
        f.push_back(bool_field("compress_downlink", &ExperimentConfig::compress_downlink));
        f.push_back(bool_field("uplink_error_feedback", &ExperimentConfig::uplink_error_feedback));
        f.push_back(bool_field("downlink_error_feedback", &ExperimentConfig::downlink_error_feedback));
        f.push_back({"weighting",
                     [](const ExperimentConfig& c) {
                         return std::string(c.weighting == fl::Weighting::samples ? "samples" : "uniform");
                     },
                     [](ExperimentConfig& c, std::string_view v) {
                         v = trim(v);
                         if (v == "samples") {
                             c.weighting = fl::Weighting::samples;
                         } else if (v == "uniform") {
                             c.weighting = fl::Weighting::uniform;
                         } else {
                             throw ArgumentError("config: weighting must be samples or uniform");
                         }
                     }});
        f.push_back(double_field("drop_probability", &ExperimentConfig::drop_probability));
        f.push_back(int_field("records", &ExperimentConfig::records));
        f.push_back({"ratios",
                     [](const ExperimentConfig& c) {
                         std::string s;
                         for (std::size_t i = 0; i < c.ratios.size(); ++i) {
                             s += (i ? "," : "") + fmt_double(c.ratios[i]);
                         }
                         return s;
                     },
                     [](ExperimentConfig& c, std::string_view v) {
                         std::size_t i = 0;
                         while (true) {
                             const auto comma = v.find(',');
                             if (i >= c.ratios.size()) {
                                 throw ArgumentError("config: ratios needs exactly 5 values");
                             }
                             c.ratios[i++] = parse_number<double>(v.substr(0, comma), "ratios");
                             if (comma == std::string_view::npos) {
                                 break;
                             }
                             v.remove_prefix(comma + 1);
                         }
                         if (i != c.ratios.size()) {
                             throw ArgumentError("config: ratios needs exactly 5 values");
                         }
                     }});
        f.push_back(double_field("test_fraction", &ExperimentConfig::test_fraction));
        f.push_back(int_field("eval_records", &ExperimentConfig::eval_records));
        f.push_back(int_field("threads", &ExperimentConfig::threads));
        f.push_back(bool_field("paired_baseline", &ExperimentConfig::paired_baseline));
        f.push_back(string_field("out_dir", &ExperimentConfig::out_dir));
        f.push_back(string_field("put_dir", &ExperimentConfig::put_dir));
        return f;
    }();
    return table;
}

std::span<const std::uint8_t> as_bytes(const std::string& s) {
    return {reinterpret_cast<const std::uint8_t*>(s.data()), s.size()};
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    write_file(path, as_bytes(text));
}

} // namespace

void ExperimentConfig::validate() const {
    if (rounds < 1) {
        throw ArgumentError("config: rounds must be >= 1");
    }
    if (clients < 1 || clients > data::kAreaCount) {
        throw ArgumentError("config: clients must lie in 1.." + std::to_string(data::kAreaCount));
    }
    if (!(local_epochs >= 0.0) || !std::isfinite(local_epochs)) {
        throw ArgumentError("config: local_epochs must be >= 0");
    }
    if (batch_size < 1) {
        throw ArgumentError("config: batch_size must be >= 1");
    }
    if (!(lr > 0.0) || !std::isfinite(lr)) {
        throw ArgumentError("config: lr must be positive");
    }
    if (!(weight_decay >= 0.0)) {
        throw ArgumentError("config: weight_decay must be >= 0");
    }
    if (qp_density < 1 || qp_density > 16) {
        throw ArgumentError("config: qp_density must lie in 1..16");
    }
    if (!(sparsity >= 0.0 && sparsity < 1.0)) {
        throw ArgumentError("config: sparsity must lie in [0, 1)");
    }
    if (!(drop_probability >= 0.0 && drop_probability <= 1.0)) {
        throw ArgumentError("config: drop_probability must lie in [0, 1]");
    }
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
        throw ArgumentError("config: test_fraction must lie in (0, 1)");
    }
    if (records < 2) {
        throw ArgumentError("config: records must be >= 2");
    }
    if (threads < 1) {
        throw ArgumentError("config: threads must be >= 1");
    }
    data::shard_sizes(records, ratios);  // checks the ratios
    lm::ModelConfig m = model;
    if (m.vocab_size == 0) {
        m.vocab_size = 1;
    }
    m.validate();
}

const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = [] {
        std::vector<std::string> k;
        for (const auto& f : fields()) {
            k.push_back(f.key);
        }
        return k;
    }();
    return keys;
}

std::string to_text(const ExperimentConfig& config) {
    std::string out = "# nncfl experiment config\n";
    for (const auto& f : fields()) {
        out += f.key + " = " + f.get(config) + "\n";
    }
    return out;
}

ExperimentConfig parse_config(std::string_view text) {
    ExperimentConfig c;
    std::map<std::string, std::size_t, std::less<>> seen;
    std::size_t line_no = 0;
    while (!text.empty()) {
        ++line_no;
        const auto nl = text.find('\n');
        std::string_view line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        line = trim(line);
        if (line.empty() || line.front() == '#') {
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw ArgumentError("config line " + std::to_string(line_no) + ": expected key = value");
        }
        const std::string key(trim(line.substr(0, eq)));
        const auto it = std::find_if(fields().begin(), fields().end(),
                                     [&](const Field& f) { return f.key == key; });
        if (it == fields().end()) {
            throw ArgumentError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
        }
        if (const auto prev = seen.find(key); prev != seen.end()) {
            throw ArgumentError("config line " + std::to_string(line_no) + ": duplicate key '" + key +
                                "' (first on line " + std::to_string(prev->second) + ")");
        }
        seen.emplace(key, line_no);
        try {
            it->set(c, line.substr(eq + 1));
        } catch (const ArgumentError& e) {
            throw ArgumentError("config line " + std::to_string(line_no) + ": " + e.what());
        }
    }
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
    const auto bytes = read_file(path);
    return parse_config(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

void save_config(const std::filesystem::path& path, const ExperimentConfig& config) {
    write_text(path, to_text(config));
}

void apply_model_spec(lm::ModelConfig& model, std::string_view spec) {
    static const std::map<std::string, int lm::ModelConfig::*, std::less<>> keys = {
        {"dim", &lm::ModelConfig::dim},          {"layers", &lm::ModelConfig::n_layers},
        {"heads", &lm::ModelConfig::n_heads},    {"vocab", &lm::ModelConfig::vocab_size},
        {"seq", &lm::ModelConfig::seq_len},      {"ffn", &lm::ModelConfig::ffn_hidden}};
    while (!spec.empty()) {
        const auto comma = spec.find(',');
        const std::string_view item = trim(spec.substr(0, comma));
        spec = comma == std::string_view::npos ? std::string_view{} : spec.substr(comma + 1);
        if (item.empty()) {
            continue;
        }
        const auto eq = item.find('=');
        if (eq == std::string_view::npos) {
            throw ArgumentError("model spec: expected key=value, got '" + std::string(item) + "'");
        }
        const auto key = trim(item.substr(0, eq));
        const auto it = keys.find(key);
        if (it == keys.end()) {
            throw ArgumentError("model spec: unknown key '" + std::string(key) + "'");
        }
        model.*(it->second) = parse_number<int>(item.substr(eq + 1), key);
    }
}

ExperimentConfig baseline_of(const ExperimentConfig& config) {
    ExperimentConfig b = config;
    b.bypass_codec = true;
    b.paired_baseline = false;
    b.put_dir.clear();
    return b;
}

bool paired(const ExperimentConfig& a, const ExperimentConfig& b) {
    ExperimentConfig x = a;
    x.qp = b.qp;
    x.qp_density = b.qp_density;
    x.sparsity = b.sparsity;
    x.bypass_codec = b.bypass_codec;
    x.compress_downlink = b.compress_downlink;
    x.uplink_error_feedback = b.uplink_error_feedback;
    x.downlink_error_feedback = b.downlink_error_feedback;
    x.paired_baseline = b.paired_baseline;
    x.out_dir = b.out_dir;
    x.put_dir = b.put_dir;
    x.threads = b.threads;
    return x == b;
}

lm::TokenSequence tokenize_record(const tok::Vocabulary& vocab, const data::CellularRecord& record) {
    lm::TokenSequence seq{tok::kBos};
    const auto body = vocab.encode(data::serialize(record));
    seq.insert(seq.end(), body.begin(), body.end());
    seq.push_back(tok::kEos);
    return seq;
}

Dataset prepare_data(const ExperimentConfig& config) {
    config.validate();
    const auto records = data::generate(config.seed, config.records);
    const auto split = data::split(records, config.ratios, config.test_fraction, config.seed);
    const auto words = data::vocabulary_words();
    Dataset d{tok::Vocabulary::build(words), {}, {}, split.test.size()};
    for (std::size_t c = 0; c < config.clients; ++c) {
        std::vector<lm::TokenSequence> shard;
        shard.reserve(split.shards[c].size());
        for (const auto& r : split.shards[c]) {
            shard.push_back(tokenize_record(d.vocab, r));
        }
        d.shards.push_back(std::move(shard));
    }
    const std::size_t n_eval =
        config.eval_records == 0 ? split.test.size() : std::min(config.eval_records, split.test.size());
    for (std::size_t i = 0; i < n_eval; ++i) {
        d.test.push_back(tokenize_record(d.vocab, split.test[i]));
    }
    return d;
}

lm::ModelConfig resolved_model(const ExperimentConfig& config, const Dataset& data) {
    lm::ModelConfig m = config.model;
    if (m.vocab_size == 0) {
        m.vocab_size = static_cast<int>(data.vocab.size());
    } else if (static_cast<std::size_t>(m.vocab_size) < data.vocab.size()) {
        throw ArgumentError("model vocab " + std::to_string(m.vocab_size) +
                            " is smaller than the tokenizer's " + std::to_string(data.vocab.size()));
    }
    m.validate();
    return m;
}

std::vector<std::string> csv_header(std::size_t clients) {
    std::vector<std::string> h{"round", "live_clients"};
    for (std::size_t c = 0; c < clients; ++c) {
        const std::string p = "c" + std::to_string(c) + "_";
        h.insert(h.end(), {p + "up_raw", p + "up_compressed", p + "down_raw", p + "down_compressed"});
    }
    h.insert(h.end(), {"up_raw", "up_compressed", "down_raw", "down_compressed", "train_loss",
                       "top1_percent", "perplexity", "measured_sparsity"});
    return h;
}

std::string metrics_csv(std::span<const RoundMetrics> rounds, std::size_t clients) {
    std::ostringstream out;
    const auto header = csv_header(clients);
    for (std::size_t i = 0; i < header.size(); ++i) {
        out << (i ? "," : "") << header[i];
    }
    out << '\n';
    for (const auto& r : rounds) {
        if (r.clients.size() != clients) {
            throw ArgumentError("metrics_csv: round " + std::to_string(r.round) + " has " +
                                std::to_string(r.clients.size()) + " clients, header has " +
                                std::to_string(clients));
        }
        out << r.round << ',' << r.live_clients;
        for (const auto& c : r.clients) {
            out << ',' << c.up_raw << ',' << c.up_compressed << ',' << c.down_raw << ','
                << c.down_compressed;
        }
        out << ',' << r.up_raw << ',' << r.up_compressed << ',' << r.down_raw << ','
            << r.down_compressed << ',' << fmt_metric(r.train_loss) << ',' << fmt_metric(r.top1_percent)
            << ',' << fmt_metric(r.perplexity) << ',' << fmt_metric(r.measured_sparsity) << '\n';
    }
    return out.str();
}

Summary summarize(const ExperimentConfig& config, std::size_t parameters,
                  std::span<const RoundMetrics> rounds) {
    Summary s;
    s.config = config;
    s.parameters = parameters;
    s.rounds = static_cast<int>(rounds.size());
    for (const auto& r : rounds) {
        s.up_raw += r.up_raw;
        s.up_compressed += r.up_compressed;
        s.down_raw += r.down_raw;
        s.down_compressed += r.down_compressed;
        s.measured_sparsity += r.measured_sparsity;
        s.wall_seconds += r.wall_seconds;
    }
    if (!rounds.empty()) {
        s.final_top1 = rounds.back().top1_percent;
        s.final_perplexity = rounds.back().perplexity;
        s.measured_sparsity /= static_cast<double>(rounds.size());
    }
    if (s.up_raw + s.down_raw > 0) {
        s.ratio_percent = nnc::compression_ratio(static_cast<double>(s.up_compressed + s.down_compressed),
                                                 static_cast<double>(s.up_raw + s.down_raw));
    }
    if (s.up_raw > 0) {
        s.uplink_ratio_percent = nnc::compression_ratio(static_cast<double>(s.up_compressed),
                                                        static_cast<double>(s.up_raw));
    }
    return s;
}

RunResult run_federation(const ExperimentConfig& config, const Dataset& data) {
    config.validate();
    if (data.shards.size() != config.clients) {
        throw ArgumentError("run_federation: dataset has " + std::to_string(data.shards.size()) +
                            " shards for " + std::to_string(config.clients) + " clients");
    }
    if (data.test.empty()) {
        throw ArgumentError("run_federation: empty evaluation set");
    }
    const lm::ModelConfig model = resolved_model(config, data);
    Rng init_rng(config.seed, streams::kInit);
    const ModelWeights base = lm::init_weights(model, init_rng);

    std::vector<fl::ClientState> clients;
    for (std::size_t c = 0; c < config.clients; ++c) {
        clients.push_back(fl::make_client(c, data.shards[c], config.seed));
    }
    fl::FederationConfig fc;
    fc.codec = {config.qp, config.qp_density, config.sparsity, config.bypass_codec};
    fc.compress_downlink = config.compress_downlink;
    fc.uplink_error_feedback = config.uplink_error_feedback;
    fc.downlink_error_feedback = config.downlink_error_feedback;
    fc.weighting = config.weighting;
    fc.train.local_epochs = config.local_epochs;
    fc.train.batch_size = config.batch_size;
    fc.train.adam.lr = config.lr;
    fc.train.adam.weight_decay = config.weight_decay;
    fc.drop_probability = config.drop_probability;
    fc.seed = config.seed;
    fc.threads = config.threads;
    fl::Federation fed(model, base, std::move(clients), fc);

    RunResult result;
    for (int r = 1; r <= config.rounds; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        fl::RoundReport rep;
        lm::EvalResult ev;
        try {
            rep = fed.run_round();
            ev = lm::evaluate(model, fed.global(), data.test);
        } catch (const fl::RoundError& e) {
            throw fl::RoundError("round " + std::to_string(r) + ": " + e.what());
        } catch (const Error& e) {
            throw Error("round " + std::to_string(r) + ": " + e.what());
        }
        RoundMetrics m;
        m.round = rep.round;
        double loss = 0.0;
        for (const auto& c : rep.clients) {
            m.clients.push_back({c.up_raw, c.up_compressed, c.down_raw, c.down_compressed});
            if (c.live) {
                ++m.live_clients;
                loss += c.train_loss;
            }
        }
        m.up_raw = rep.up_raw;
        m.up_compressed = rep.up_compressed;
        m.down_raw = rep.down_raw;
        m.down_compressed = rep.down_compressed;
        m.train_loss = m.live_clients ? loss / static_cast<double>(m.live_clients) : 0.0;
        m.top1_percent = ev.top1_percent;
        m.perplexity = ev.perplexity;
        m.measured_sparsity = rep.measured_sparsity;
        m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.rounds.push_back(std::move(m));
    }
    result.summary = summarize(config, fed.parameter_count(), result.rounds);
    result.final_weights = fed.global();
    result.latest_aggregate = fed.latest_aggregate();
    if (!config.put_dir.empty()) {
        fed.tree().save(config.put_dir);
    }
    return result;
}

RunResult run_federation(const ExperimentConfig& config) {
    return run_federation(config, prepare_data(config));
}

Verdict report_transparency(const Summary& compressed, const Summary& baseline, double top1_threshold,
                            double ppl_threshold) {
    if (!paired(compressed.config, baseline.config)) {
        throw ArgumentError("report_transparency: runs differ in more than codec settings");
    }
    if (!(top1_threshold >= 0.0) || !(ppl_threshold >= 0.0)) {
        throw ArgumentError("report_transparency: thresholds must be >= 0");
    }
    Verdict v;
    v.delta.top1 = compressed.final_top1 - baseline.final_top1;
    v.delta.perplexity = compressed.final_perplexity - baseline.final_perplexity;
    // thresholds like 0.01 are not exact in binary
    constexpr double kSlack = 1e-9;
    v.transparent = std::abs(v.delta.top1) <= top1_threshold + kSlack &&
                    std::abs(v.delta.perplexity) <= ppl_threshold + kSlack;
    return v;
}

namespace {

nlohmann::ordered_json summary_object(const Summary& s) {
    nlohmann::ordered_json j;
    j["parameters"] = s.parameters;
    j["rounds"] = s.rounds;
    j["bypass_codec"] = s.config.bypass_codec;
    j["qp"] = s.config.qp;
    j["qp_density"] = s.config.qp_density;
    j["sparsity"] = s.config.sparsity;
    j["lr"] = s.config.lr;
    j["final_top1_percent"] = s.final_top1;
    j["final_perplexity"] = s.final_perplexity;
    j["up_raw_bytes"] = s.up_raw;
    j["up_compressed_bytes"] = s.up_compressed;
    j["down_raw_bytes"] = s.down_raw;
    j["down_compressed_bytes"] = s.down_compressed;
    j["compression_ratio_percent"] = s.ratio_percent;
    j["uplink_compression_ratio_percent"] = s.uplink_ratio_percent;
    j["measured_sparsity"] = s.measured_sparsity;
    return j;
}

std::string timings_csv(std::span<const RoundMetrics> rounds) {
    std::string out = "round,wall_seconds\n";
    for (const auto& r : rounds) {
        out += std::to_string(r.round) + "," + fmt_metric(r.wall_seconds) + "\n";
    }
    return out;
}

} // namespace

std::string summary_json(const ExperimentResult& result) {
    nlohmann::ordered_json j;
    j["run"] = summary_object(result.run.summary);
    if (result.baseline) {
        j["baseline"] = summary_object(result.baseline->summary);
    }
    if (result.verdict) {
        j["degradation"] = {{"top1_percent", result.verdict->delta.top1},
                            {"perplexity", result.verdict->delta.perplexity}};
        j["transparent"] = result.verdict->transparent;
    }
    return j.dump(2) + "\n";
}

ExperimentResult run_experiment(const ExperimentConfig& config) {
    config.validate();
    const Dataset data = prepare_data(config);
    ExperimentResult out;
    out.run = run_federation(config, data);
    if (config.paired_baseline && !config.bypass_codec) {
        out.baseline = run_federation(baseline_of(config), data);
        out.verdict = report_transparency(out.run.summary, out.baseline->summary);
    }
    if (!config.out_dir.empty()) {
        const std::filesystem::path dir(config.out_dir);
        std::filesystem::create_directories(dir);
        write_text(dir / "config.txt", to_text(config));
        write_text(dir / "metrics.csv", metrics_csv(out.run.rounds, config.clients));
        std::string timings = timings_csv(out.run.rounds);
        if (out.baseline) {
            write_text(dir / "baseline_metrics.csv", metrics_csv(out.baseline->rounds, config.clients));
            write_text(dir / "baseline_timings.csv", timings_csv(out.baseline->rounds));
        }
        write_text(dir / "timings.csv", timings);
        write_text(dir / "summary.json", summary_json(out));
    }
    return out;
}

std::vector<SweepRow> sweep(const ExperimentConfig& base, std::span<const int> qps,
                            std::span<const double> sparsities, std::span<const double> lrs) {
    if (qps.empty() || sparsities.empty() || lrs.empty()) {
        throw ArgumentError("sweep: every grid axis needs at least one value");
    }
    base.validate();
    const Dataset data = prepare_data(base);
    std::vector<SweepRow> rows;
    for (const double lr : lrs) {
        ExperimentConfig lr_config = base;
        lr_config.lr = lr;
        lr_config.put_dir.clear();
        lr_config.out_dir.clear();
        std::optional<RunResult> baseline;
        std::string baseline_error;
        try {
            baseline = run_federation(baseline_of(lr_config), data);
        } catch (const Error& e) {
            baseline_error = std::string("baseline: ") + e.what();
        }
        for (const int qp : qps) {
            for (const double sp : sparsities) {
                SweepRow row;
                row.qp = qp;
                row.sparsity = sp;
                row.lr = lr;
                ExperimentConfig cell = lr_config;
                cell.qp = qp;
                cell.sparsity = sp;
                cell.bypass_codec = false;
                try {
                    if (!baseline) {
                        throw Error(baseline_error);
                    }
                    const RunResult run = run_federation(cell, data);
                    row.summary = run.summary;
                    row.verdict = report_transparency(run.summary, baseline->summary);
                    row.ok = true;
                    if (!base.out_dir.empty()) {
                        const auto dir = std::filesystem::path(base.out_dir) /
                                         ("cell_qp" + std::to_string(qp) + "_sp" + fmt_metric(sp) +
                                          "_lr" + fmt_metric(lr));
                        std::filesystem::create_directories(dir);
                        write_text(dir / "metrics.csv", metrics_csv(run.rounds, cell.clients));
                    }
                } catch (const Error& e) {
                    row.ok = false;
                    row.error = e.what();
                    row.summary.config = cell;
                }
                rows.push_back(std::move(row));
            }
        }
    }
    if (!base.out_dir.empty()) {
        std::filesystem::create_directories(base.out_dir);
        write_text(std::filesystem::path(base.out_dir) / "sweep.csv", sweep_csv(rows));
    }
    return rows;
}

std::string sweep_csv(std::span<const SweepRow> rows) {
    std::ostringstream out;
    out << "qp,sparsity,lr,status,parameters,final_top1_percent,final_perplexity,"
           "compression_ratio_percent,uplink_compression_ratio_percent,up_compressed,up_raw,"
           "down_compressed,down_raw,measured_sparsity,delta_top1,delta_perplexity,transparent,error\n";
    for (const auto& r : rows) {
        std::string err = r.error;
        for (std::size_t p = 0; (p = err.find('"', p)) != std::string::npos; p += 2) {
            err.insert(p, "\"");
        }
        out << r.qp << ',' << fmt_metric(r.sparsity) << ',' << fmt_metric(r.lr) << ','
            << (r.ok ? "ok" : "failed") << ',';
        if (r.ok) {
            const auto& s = r.summary;
            out << s.parameters << ',' << fmt_metric(s.final_top1) << ',' << fmt_metric(s.final_perplexity)
                << ',' << fmt_metric(s.ratio_percent) << ',' << fmt_metric(s.uplink_ratio_percent) << ','
                << s.up_compressed << ',' << s.up_raw << ',' << s.down_compressed << ',' << s.down_raw
                << ',' << fmt_metric(s.measured_sparsity) << ',' << fmt_metric(r.verdict.delta.top1)
                << ',' << fmt_metric(r.verdict.delta.perplexity) << ','
                << (r.verdict.transparent ? "true" : "false") << ",";
        } else {
            out << ",,,,,,,,,,,,,";
        }
        out << '"' << err << "\"\n";
    }
    return out.str();
}

} // namespace nncfl::harness
