// nncfl: command-line front end for data generation, federated runs, sweeps
// and the bitstream/update-tree utilities.

#include "nncfl/checkpoint.hpp"
#include "nncfl/experiment.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <iostream>

using namespace nncfl;

namespace {

struct RunFlags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<int> rounds;
    std::optional<std::size_t> clients;
    std::optional<int> qp;
    std::optional<double> sparsity;
    std::optional<double> lr;
    std::optional<double> local_epochs;
    std::optional<std::size_t> batch_size;
    std::optional<std::size_t> records;
    std::optional<std::size_t> eval_records;
    std::optional<std::size_t> threads;
    std::string model;
    bool bypass = false;
    bool no_downlink = false;
    bool no_baseline = false;
    std::string out;
    std::string put_dir;
};

void add_run_flags(CLI::App* cmd, RunFlags& f) {
    cmd->add_option("--config", f.config, "key = value config file; flags override it");
    cmd->add_option("--seed", f.seed, "master seed");
    cmd->add_option("--rounds", f.rounds, "communication rounds");
    cmd->add_option("--clients", f.clients, "number of clients (1-5)");
    cmd->add_option("--qp", f.qp, "quantization parameter");
    cmd->add_option("--sparsity", f.sparsity, "target sparsity as a fraction in [0, 1)");
    cmd->add_option("--lr", f.lr, "client learning rate");
    cmd->add_option("--local-epochs", f.local_epochs, "passes over each shard per round");
    cmd->add_option("--batch-size", f.batch_size, "records per optimizer step");
    cmd->add_option("--records", f.records, "synthetic records to generate");
    cmd->add_option("--eval-records", f.eval_records, "test records evaluated per round (0 = all)");
    cmd->add_option("--threads", f.threads, "worker threads for local training");
    cmd->add_option("--model", f.model, "dim=..,layers=..,heads=..,vocab=..,seq=..,ffn=..");
    cmd->add_flag("--bypass-codec", f.bypass, "send raw float32 updates");
    cmd->add_flag("--no-downlink-compression", f.no_downlink, "send the aggregate uncompressed");
    cmd->add_flag("--no-baseline", f.no_baseline, "skip the paired uncompressed run");
    cmd->add_option("--out", f.out, "output directory");
    cmd->add_option("--put-dir", f.put_dir, "persist the parameter update tree here");
}

harness::ExperimentConfig build_config(const RunFlags& f) {
    harness::ExperimentConfig c = f.config.empty() ? harness::ExperimentConfig{}
                                                   : harness::load_config(f.config);
    if (f.seed) c.seed = *f.seed;
    if (f.rounds) c.rounds = *f.rounds;
    if (f.clients) c.clients = *f.clients;
    if (f.qp) c.qp = *f.qp;
    if (f.sparsity) c.sparsity = *f.sparsity;
    if (f.lr) c.lr = *f.lr;
    if (f.local_epochs) c.local_epochs = *f.local_epochs;
    if (f.batch_size) c.batch_size = *f.batch_size;
    if (f.records) c.records = *f.records;
    if (f.eval_records) c.eval_records = *f.eval_records;
    if (f.threads) c.threads = *f.threads;
    if (!f.model.empty()) harness::apply_model_spec(c.model, f.model);
    if (f.bypass) c.bypass_codec = true;
    if (f.no_downlink) c.compress_downlink = false;
    if (f.no_baseline) c.paired_baseline = false;
    if (!f.out.empty()) c.out_dir = f.out;
    if (!f.put_dir.empty()) c.put_dir = f.put_dir;
    c.validate();
    return c;
}

void print_summary(const char* label, const harness::Summary& s) {
    std::printf("%-9s top1 %.2f%%  ppl %.4f  bytes up %zu/%zu down %zu/%zu  ratio %.2f%% (uplink %.2f%%)\n",
                label, s.final_top1, s.final_perplexity, s.up_compressed, s.up_raw, s.down_compressed,
                s.down_raw, s.ratio_percent, s.uplink_ratio_percent);
}

template <typename T>
std::vector<T> parse_list(const std::string& s) {
    std::vector<T> out;
    std::size_t pos = 0;
    while (pos <= s.size()) {
        const auto comma = s.find(',', pos);
        const std::string item = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
        std::size_t used = 0;
        T v{};
        try {
            if constexpr (std::is_same_v<T, int>) {
                v = std::stoi(item, &used);
            } else {
                v = std::stod(item, &used);
            }
        } catch (const std::exception&) {
            used = 0;
        }
        if (item.empty() || used != item.size()) {
            throw ArgumentError("bad list item '" + item + "' in '" + s + "'");
        }
        out.push_back(v);
        if (comma == std::string::npos) {
            break;
        }
        pos = comma + 1;
    }
    return out;
}

ModelWeights load_weights(const std::string& path) { return load_checkpoint(path).tensors; }

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Federated training of a small language model with compressed updates"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "write a synthetic corpus and its manifest");
    std::uint64_t gen_seed = 1;
    std::size_t gen_records = 9000;
    double gen_test_fraction = 0.1;
    std::string gen_out, gen_manifest;
    gen->add_option("--seed", gen_seed, "generator seed");
    gen->add_option("--records", gen_records, "number of records");
    gen->add_option("--test-fraction", gen_test_fraction, "held-out fraction recorded in the manifest");
    gen->add_option("--manifest", gen_manifest, "regenerate from an existing manifest (other flags ignored)");
    gen->add_option("--out", gen_out, "corpus path")->required();

    // run
    auto* run = app.add_subcommand("run", "federated run plus paired uncompressed baseline");
    RunFlags run_flags;
    add_run_flags(run, run_flags);

    // sweep
    auto* sw = app.add_subcommand("sweep", "grid over qp x sparsity x lr");
    RunFlags sweep_flags;
    std::string sweep_qps = "-26,-22,-18", sweep_sparsities = "0,0.6,0.8", sweep_lrs;
    sw->add_option("--config", sweep_flags.config, "base config file");
    sw->add_option("--seed", sweep_flags.seed, "master seed");
    sw->add_option("--rounds", sweep_flags.rounds, "communication rounds");
    sw->add_option("--local-epochs", sweep_flags.local_epochs, "passes over each shard per round");
    sw->add_option("--model", sweep_flags.model, "dim=..,layers=..,heads=..,vocab=..,seq=..,ffn=..");
    sw->add_option("--qps", sweep_qps, "comma-separated qp values");
    sw->add_option("--sparsities", sweep_sparsities, "comma-separated sparsity fractions");
    sw->add_option("--lrs", sweep_lrs, "comma-separated learning rates (default: config lr)");
    sw->add_option("--out", sweep_flags.out, "output directory for sweep.csv");

    // encode
    auto* enc = app.add_subcommand("encode", "code a checkpoint (or its difference to a reference)");
    std::string enc_in, enc_out, enc_ref;
    int enc_qp = -26, enc_density = 2;
    double enc_sparsity = 0.0;
    bool enc_bypass = false;
    enc->add_option("--in", enc_in, "checkpoint to encode")->required();
    enc->add_option("--out", enc_out, "bitstream path")->required();
    enc->add_option("--reference", enc_ref, "encode in - reference instead of in");
    enc->add_option("--qp", enc_qp, "quantization parameter");
    enc->add_option("--qp-density", enc_density, "step-size resolution bits");
    enc->add_option("--sparsity", enc_sparsity, "fraction of values zeroed before quantization");
    enc->add_flag("--bypass-codec", enc_bypass, "store raw float32");

    // decode
    auto* dec = app.add_subcommand("decode", "decode a bitstream into a checkpoint");
    std::string dec_in, dec_out, dec_ref;
    dec->add_option("--in", dec_in, "bitstream path")->required();
    dec->add_option("--out", dec_out, "checkpoint path")->required();
    dec->add_option("--reference", dec_ref, "add the decoded update to this checkpoint");

    // resolve
    auto* res = app.add_subcommand("resolve", "rebuild the weights of an update-tree node");
    std::string res_dir, res_out;
    std::optional<std::uint64_t> res_node;
    res->add_option("--put-dir", res_dir, "directory written by a run with --put-dir")->required();
    res->add_option("--node", res_node, "node id (default: newest aggregate)");
    res->add_option("--out", res_out, "checkpoint path")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            data::CorpusManifest m;
            if (!gen_manifest.empty()) {
                m = data::load_manifest(gen_manifest);
            } else {
                m.seed = gen_seed;
                m.records = gen_records;
                m.test_fraction = gen_test_fraction;
            }
            data::write_corpus(gen_out, m);
            std::printf("wrote %zu records to %s\n", m.records, gen_out.c_str());
        } else if (*run) {
            const auto config = build_config(run_flags);
            const auto result = harness::run_experiment(config);
            print_summary("run", result.run.summary);
            if (result.baseline) {
                print_summary("baseline", result.baseline->summary);
                std::printf("degradation top1 %+.2f pp  ppl %+.4f  -> %s\n", result.verdict->delta.top1,
                            result.verdict->delta.perplexity,
                            result.verdict->transparent ? "TRANSPARENT" : "NOT transparent");
            }
        } else if (*sw) {
            const auto base = build_config(sweep_flags);
            const auto qps = parse_list<int>(sweep_qps);
            const auto sps = parse_list<double>(sweep_sparsities);
            const auto lrs = sweep_lrs.empty() ? std::vector<double>{base.lr} : parse_list<double>(sweep_lrs);
            const auto rows = harness::sweep(base, qps, sps, lrs);
            std::cout << harness::sweep_csv(rows);
        } else if (*enc) {
            ModelWeights update = load_weights(enc_in);
            if (!enc_ref.empty()) {
                update = difference(update, load_weights(enc_ref));
            }
            nnc::CodecConfig cc{enc_qp, enc_density, enc_sparsity, enc_bypass};
            const auto stream = nnc::encode_update(update, cc, 1, 0);
            stream.save(enc_out);
            std::printf("%zu values -> %zu bytes (%.2f%%)\n", update.parameter_count(), stream.byte_size(),
                        nnc::compression_ratio(static_cast<double>(stream.byte_size()),
                                               4.0 * static_cast<double>(update.parameter_count())));
        } else if (*dec) {
            ModelWeights w = nnc::decode_update(nnc::NncBitstream::load(dec_in));
            std::optional<lm::ModelConfig> model;
            if (!dec_ref.empty()) {
                const auto ref = load_checkpoint(dec_ref);
                require_same_layout(w, ref.tensors, "decode");
                ModelWeights sum = ref.tensors;
                add_in_place(sum, w);
                w = std::move(sum);
                model = ref.config;
            }
            save_checkpoint(dec_out, Checkpoint{model, w});
        } else if (*res) {
            const auto tree = fl::ParameterUpdateTree::load(res_dir);
            std::uint64_t node = fl::ParameterUpdateTree::kRootId;
            if (res_node) {
                node = *res_node;
            } else {
                for (const auto& [id, n] : tree.nodes()) {
                    if (n.kind == fl::NodeKind::aggregate) {
                        node = id;
                    }
                }
            }
            save_checkpoint(res_out, Checkpoint{std::nullopt, tree.resolve(node)});
            std::printf("resolved node %llu -> %s\n", static_cast<unsigned long long>(node), res_out.c_str());
        }
    } catch (const Error& e) {
        std::fprintf(stderr, "nncfl: %s\n", e.what());
        return 1;
    }
    return 0;
}
