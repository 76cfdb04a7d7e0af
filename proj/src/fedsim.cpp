#include "nncfl/fedsim.hpp"

#include "nncfl/byte_io.hpp"
#include "nncfl/checkpoint.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <numeric>
#include <thread>

namespace nncfl::fl {

std::size_t local_steps(std::size_t samples, double epochs, std::size_t batch_size) {
    if (!(epochs >= 0.0) || batch_size == 0) {
        throw ArgumentError("local_steps: epochs must be >= 0 and batch_size > 0");
    }
    if (epochs == 0.0 || samples == 0) {
        return 0;
    }
    const double steps = epochs * static_cast<double>(samples) / static_cast<double>(batch_size);
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(steps)));
}

ModelWeights local_train(ModelWeights& local, lm::AdamState& optimizer, const ModelWeights& global,
                         std::size_t steps, const LocalTrainConfig& config, const GradientFn& grad_fn) {
    local = global;
    if (optimizer.m.empty()) {
        optimizer = lm::make_adam_state(global);
    }
    ModelWeights grads = global.zeros_like();
    for (std::size_t s = 0; s < steps; ++s) {
        grads = global.zeros_like();
        const double loss = grad_fn(local, grads);
        if (!std::isfinite(loss)) {
            throw NumericError("local_train: non-finite loss at step " + std::to_string(s));
        }
        if (config.optimizer == Optimizer::sgd) {
            lm::sgd_step(local, grads, config.adam.lr);
        } else {
            lm::adamw_step(local, grads, optimizer, config.adam);
        }
    }
    return difference(local, global);
}

ClientState make_client(std::size_t id, std::vector<lm::TokenSequence> shard, std::uint64_t seed) {
    ClientState c;
    c.id = id;
    c.sample_count = shard.size();
    c.shard = std::move(shard);
    c.rng = Rng(seed, streams::kClientBase + id);
    return c;
}

namespace {

// Next minibatch from the client's running permutation; reshuffles at the end
// of each pass.
std::vector<lm::TokenSequence> next_batch(ClientState& c, std::size_t batch_size) {
    std::vector<lm::TokenSequence> out;
    out.reserve(batch_size);
    for (std::size_t i = 0; i < batch_size && !c.shard.empty(); ++i) {
        if (c.cursor >= c.order.size()) {
            c.order.resize(c.shard.size());
            std::iota(c.order.begin(), c.order.end(), std::size_t{0});
            for (std::size_t k = c.order.size(); k > 1; --k) {
                std::swap(c.order[k - 1], c.order[c.rng.below(static_cast<std::uint32_t>(k))]);
            }
            c.cursor = 0;
        }
        out.push_back(c.shard[c.order[c.cursor++]]);
    }
    return out;
}

} // namespace

ModelWeights local_train(ClientState& client, const lm::ModelConfig& model,
                         const ModelWeights& global, const LocalTrainConfig& config) {
    const std::size_t steps = local_steps(client.sample_count, config.local_epochs, config.batch_size);
    double loss_sum = 0.0;
    const GradientFn fn = [&](const ModelWeights& w, ModelWeights& grads) {
        const auto seqs = next_batch(client, config.batch_size);
        const auto batch = lm::make_batch(seqs, static_cast<std::size_t>(model.seq_len));
        auto lg = lm::loss_and_grads(model, w, batch);
        grads = std::move(lg.grads);
        loss_sum += lg.loss;
        return lg.loss;
    };
    auto delta = local_train(client.weights, client.optimizer, global, steps, config, fn);
    client.last_loss = steps == 0 ? 0.0 : loss_sum / static_cast<double>(steps);
    return delta;
}

ModelWeights aggregate_delta(std::span<const ModelWeights> updates, std::span<const double> weights) {
    if (updates.empty() || updates.size() != weights.size()) {
        throw ArgumentError("aggregate: need one weight per update and at least one update");
    }
    double total = 0.0;
    for (const double w : weights) {
        if (!(w >= 0.0)) {
            throw ArgumentError("aggregate: weights must be non-negative");
        }
        total += w;
    }
    if (!(total > 0.0)) {
        throw ArgumentError("aggregate: weights sum to zero");
    }
    for (std::size_t i = 1; i < updates.size(); ++i) {
        require_same_layout(updates[i], updates[0], "aggregate update " + std::to_string(i));
    }
    ModelWeights out = updates[0].zeros_like();
    std::vector<double> acc;
    for (std::size_t t = 0; t < out.count(); ++t) {
        acc.assign(out[t].size(), 0.0);
        for (std::size_t i = 0; i < updates.size(); ++i) {
            const double w = weights[i] / total;
            const auto u = updates[i][t].values();
            for (std::size_t j = 0; j < acc.size(); ++j) {
                acc[j] += w * static_cast<double>(u[j]);
            }
        }
        auto o = out[t].values();
        for (std::size_t j = 0; j < acc.size(); ++j) {
            o[j] = static_cast<float>(acc[j]);
        }
    }
    return out;
}

ModelWeights aggregate(const ModelWeights& global, std::span<const ModelWeights> updates,
                       std::span<const double> weights) {
    const ModelWeights delta = aggregate_delta(updates, weights);
    require_same_layout(delta, global, "aggregate");
    ModelWeights out = global;
    add_in_place(out, delta);
    return out;
}

// ---------------------------------------------------------------------------
// ParameterUpdateTree

ParameterUpdateTree::ParameterUpdateTree(const ModelWeights& base) : base_(base) {
    PutNode root;
    root.id = kRootId;
    root.kind = NodeKind::root;
    root.payload = serialize_checkpoint(Checkpoint{std::nullopt, base});
    nodes_.emplace(kRootId, std::move(root));
}

const PutNode& ParameterUpdateTree::node(std::uint64_t id) const {
    const auto it = nodes_.find(id);
    if (it == nodes_.end()) {
        throw LookupError("parameter update tree: unknown node " + std::to_string(id));
    }
    return it->second;
}

std::uint64_t ParameterUpdateTree::insert(const nnc::NncBitstream& stream, NodeKind kind, int round,
                                          std::vector<std::size_t> clients) {
    if (kind == NodeKind::root) {
        throw ArgumentError("parameter update tree: cannot insert a second root");
    }
    if (stream.node_id != next_id_) {
        throw IntegrityError("parameter update tree: stream carries node id " +
                             std::to_string(stream.node_id) + ", expected " + std::to_string(next_id_));
    }
    if (!contains(stream.parent_id)) {
        throw LookupError("parameter update tree: unknown parent " + std::to_string(stream.parent_id));
    }
    PutNode n;
    n.id = stream.node_id;
    n.parent = stream.parent_id;
    n.kind = kind;
    n.round = round;
    n.clients = std::move(clients);
    n.payload = stream.serialize();
    nodes_.emplace(n.id, std::move(n));
    return next_id_++;
}

std::vector<std::uint64_t> ParameterUpdateTree::path_to(std::uint64_t id) const {
    std::vector<std::uint64_t> path;
    std::uint64_t cur = id;
    for (;;) {
        const PutNode& n = node(cur);
        path.push_back(cur);
        if (n.kind == NodeKind::root) {
            break;
        }
        if (path.size() > nodes_.size()) {
            throw IntegrityError("parameter update tree: cycle through node " + std::to_string(id));
        }
        cur = n.parent;
    }
    if (cur != kRootId) {
        throw IntegrityError("parameter update tree: path from " + std::to_string(id) +
                             " ends at a foreign root");
    }
    std::reverse(path.begin(), path.end());
    return path;
}

ModelWeights ParameterUpdateTree::resolve(std::uint64_t id) const {
    const auto path = path_to(id);
    ModelWeights w = base_;
    for (std::size_t i = 1; i < path.size(); ++i) {
        const auto stream = nnc::NncBitstream::parse(node(path[i]).payload);
        add_in_place(w, nnc::decode_update(stream, base_));
    }
    return w;
}

namespace {

std::string kind_name(NodeKind k) {
    switch (k) {
    case NodeKind::root:
        return "root";
    case NodeKind::client_update:
        return "client_update";
    case NodeKind::aggregate:
        return "aggregate";
    }
    return "?";
}

NodeKind kind_from(const std::string& s) {
    if (s == "root") {
        return NodeKind::root;
    }
    if (s == "client_update") {
        return NodeKind::client_update;
    }
    if (s == "aggregate") {
        return NodeKind::aggregate;
    }
    throw FormatError("put manifest: unknown node kind '" + s + "'");
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

} // namespace

void ParameterUpdateTree::save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    nlohmann::ordered_json manifest;
    manifest["format"] = "nncfl-put-v1";
    manifest["next_id"] = next_id_;
    auto& arr = manifest["nodes"] = nlohmann::ordered_json::array();
    for (const auto& [id, n] : nodes_) {
        const std::string file = std::to_string(id) + (n.kind == NodeKind::root ? ".ckpt" : ".nnfl");
        write_file(dir / file, n.payload);
        nlohmann::ordered_json e;
        e["id"] = id;
        e["parent"] = n.kind == NodeKind::root ? nlohmann::ordered_json(nullptr)
                                                : nlohmann::ordered_json(n.parent);
        e["kind"] = kind_name(n.kind);
        e["round"] = n.round;
        e["clients"] = n.clients;
        e["file"] = file;
        e["bytes"] = n.payload.size();
        e["fnv1a64"] = hex64(fnv1a64(n.payload));
        arr.push_back(std::move(e));
    }
    const std::string text = manifest.dump(2) + "\n";
    write_file(dir / "manifest.json",
               std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

ParameterUpdateTree ParameterUpdateTree::load(const std::filesystem::path& dir) {
    const auto bytes = read_file(dir / "manifest.json");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.begin(), bytes.end());
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("put manifest: ") + e.what());
    }
    ParameterUpdateTree tree;
    try {
        if (manifest.at("format").get<std::string>() != "nncfl-put-v1") {
            throw FormatError("put manifest: unknown format");
        }
        tree.next_id_ = manifest.at("next_id").get<std::uint64_t>();
        for (const auto& e : manifest.at("nodes")) {
            PutNode n;
            n.id = e.at("id").get<std::uint64_t>();
            n.kind = kind_from(e.at("kind").get<std::string>());
            n.parent = e.at("parent").is_null() ? nnc::kNoParent : e.at("parent").get<std::uint64_t>();
            n.round = e.at("round").get<int>();
            n.clients = e.at("clients").get<std::vector<std::size_t>>();
            n.payload = read_file(dir / e.at("file").get<std::string>());
            if (hex64(fnv1a64(n.payload)) != e.at("fnv1a64").get<std::string>()) {
                throw IntegrityError("put: hash mismatch for node " + std::to_string(n.id));
            }
            if (n.id >= tree.next_id_ || !tree.nodes_.emplace(n.id, std::move(n)).second) {
                throw IntegrityError("put manifest: duplicate or out-of-range node id");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("put manifest: ") + e.what());
    }
    tree.validate();
    tree.base_ = parse_checkpoint(tree.node(kRootId).payload).tensors;
    return tree;
}

void ParameterUpdateTree::validate() const {
    std::size_t roots = 0;
    for (const auto& [id, n] : nodes_) {
        if (n.kind == NodeKind::root) {
            ++roots;
            if (id != kRootId) {
                throw IntegrityError("parameter update tree: root must have id 0");
            }
            continue;
        }
        if (!contains(n.parent)) {
            throw IntegrityError("parameter update tree: node " + std::to_string(id) +
                                 " has a missing parent");
        }
        const auto stream = nnc::NncBitstream::parse(n.payload);
        if (stream.node_id != id || stream.parent_id != n.parent) {
            throw IntegrityError("parameter update tree: node " + std::to_string(id) +
                                 " disagrees with its stream header");
        }
    }
    if (roots != 1) {
        throw IntegrityError("parameter update tree: expected exactly one root, found " +
                             std::to_string(roots));
    }
    for (const auto& [id, n] : nodes_) {
        path_to(id);  // throws on cycles
    }
}

std::uint64_t put_insert(ParameterUpdateTree& tree, std::uint64_t parent, nnc::NncBitstream stream,
                         NodeKind kind, int round, std::vector<std::size_t> clients) {
    stream.node_id = tree.next_id();
    stream.parent_id = parent;
    return tree.insert(stream, kind, round, std::move(clients));
}

ModelWeights put_resolve(const ParameterUpdateTree& tree, std::uint64_t id) {
    return tree.resolve(id);
}

// ---------------------------------------------------------------------------
// Federation

Federation::Federation(lm::ModelConfig model, const ModelWeights& base,
                       std::vector<ClientState> clients, FederationConfig config)
    : model_(model), config_(std::move(config)), clients_(std::move(clients)), global_(base),
      previous_global_(base), tree_(base), failure_rng_(config_.seed, streams::kFailures) {
    if (clients_.empty()) {
        throw ArgumentError("federation needs at least one client");
    }
    for (auto& c : clients_) {
        if (c.sample_count != c.shard.size()) {
            throw ArgumentError("client " + std::to_string(c.id) + ": sample_count != shard size");
        }
        if (c.optimizer.m.empty()) {
            c.optimizer = lm::make_adam_state(base);
        }
    }
    if (!(config_.drop_probability >= 0.0 && config_.drop_probability <= 1.0)) {
        throw ArgumentError("drop_probability must lie in [0, 1]");
    }
}

ModelWeights Federation::accept_update(const nnc::NncBitstream& stream) const {
    const bool current = stream.parent_id == current_node_;
    const bool stale_ok = config_.async_mode && round_ > 0 && stream.parent_id == previous_node_;
    if (!current && !stale_ok) {
        throw IntegrityError("update " + std::to_string(stream.node_id) + " references parent " +
                             std::to_string(stream.parent_id) + ", which is not an accepted base");
    }
    return nnc::decode_update(stream, global_);
}

RoundReport Federation::run_round() {
    const int round = round_ + 1;
    const std::size_t params = global_.parameter_count();
    const std::size_t raw_bytes = 4 * params;

    // Drop draws happen for every client every round so the failure pattern
    // does not depend on earlier outcomes.
    std::vector<bool> live(clients_.size(), true);
    for (std::size_t i = 0; i < clients_.size(); ++i) {
        const double u = failure_rng_.uniform01();
        if (u < config_.drop_probability || config_.forced_failures.contains({round, clients_[i].id})) {
            live[i] = false;
        }
    }

    // Local training, possibly on worker threads.
    struct Outcome {
        ModelWeights delta;
        std::uint64_t parent = 0;
        bool ok = false;
        double loss = 0.0;
    };
    std::vector<Outcome> outcomes(clients_.size());
    const auto train_one = [&](std::size_t i) {
        ClientState& c = clients_[i];
        const bool stale = config_.async_mode && round > 1 && config_.stale_clients.contains(c.id);
        const ModelWeights& base = stale ? previous_global_ : global_;
        outcomes[i].parent = stale ? previous_node_ : current_node_;
        try {
            outcomes[i].delta = local_train(c, model_, base, config_.train);
            outcomes[i].ok = outcomes[i].delta.all_finite();
            outcomes[i].loss = c.last_loss;
        } catch (const NumericError&) {
            outcomes[i].ok = false;
        }
    };
    std::vector<std::size_t> todo;
    for (std::size_t i = 0; i < clients_.size(); ++i) {
        if (live[i]) {
            todo.push_back(i);
        }
    }
    if (config_.threads <= 1) {
        for (const auto i : todo) {
            train_one(i);
        }
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(config_.threads);
        for (std::size_t w = 0; w < config_.threads; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t k = w; k < todo.size(); k += config_.threads) {
                        train_one(todo[k]);
                    }
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
        for (auto& t : pool) {
            t.join();
        }
        for (const auto& e : errors) {
            if (e) {
                std::rethrow_exception(e);
            }
        }
    }

    RoundReport report;
    report.round = round;
    std::vector<ModelWeights> decoded;
    std::vector<double> weights;
    std::vector<nnc::NncBitstream> uploads;
    std::vector<std::size_t> uploaders;
    nnc::EncodeStats up_stats;
    std::uint64_t next_id = tree_.next_id();
    for (std::size_t i = 0; i < clients_.size(); ++i) {
        ClientRoundStats cs;
        cs.client = clients_[i].id;
        if (live[i] && outcomes[i].ok) {
            ClientState& c = clients_[i];
            ModelWeights upload = std::move(outcomes[i].delta);
            if (config_.uplink_error_feedback && !config_.codec.bypass) {
                if (c.residual.empty()) {
                    c.residual = upload.zeros_like();
                }
                add_in_place(upload, c.residual);
            }
            const auto stream = nnc::encode_update(upload, config_.codec, next_id++,
                                                   outcomes[i].parent, &up_stats);
            const auto wire = stream.serialize();
            const auto received = nnc::NncBitstream::parse(wire);
            ModelWeights dhat = accept_update(received);
            if (config_.uplink_error_feedback && !config_.codec.bypass) {
                c.residual = difference(upload, dhat);
            }
            cs.live = true;
            cs.up_raw = raw_bytes;
            cs.up_compressed = wire.size();
            decoded.push_back(std::move(dhat));
            weights.push_back(config_.weighting == Weighting::samples
                                  ? static_cast<double>(c.sample_count)
                                  : 1.0);
            uploads.push_back(received);
            uploaders.push_back(c.id);
        }
        report.clients.push_back(cs);
    }
    if (decoded.empty()) {
        throw RoundError("round " + std::to_string(round) + ": no client delivered an update");
    }
    for (std::size_t k = 0; k < uploads.size(); ++k) {
        tree_.insert(uploads[k], NodeKind::client_update, round, {uploaders[k]});
    }

    ModelWeights delta = aggregate_delta(decoded, weights);
    nnc::CodecConfig down = config_.codec;
    if (!config_.compress_downlink) {
        down.bypass = true;
    }
    const bool down_feedback = config_.downlink_error_feedback && !down.bypass;
    if (down_feedback) {
        if (downlink_residual_.empty()) {
            downlink_residual_ = delta.zeros_like();
        }
        add_in_place(delta, downlink_residual_);
    }
    const auto down_stream = nnc::encode_update(delta, down, tree_.next_id(), current_node_);
    const auto down_wire = down_stream.serialize();
    const auto down_received = nnc::NncBitstream::parse(down_wire);
    const ModelWeights dhat = nnc::decode_update(down_received, global_);
    if (down_feedback) {
        downlink_residual_ = difference(delta, dhat);
    }

    previous_global_ = global_;
    add_in_place(global_, dhat);
    previous_node_ = current_node_;
    current_node_ = tree_.insert(down_received, NodeKind::aggregate, round, uploaders);
    round_ = round;

    for (auto& cs : report.clients) {
        cs.down_raw = raw_bytes;
        cs.down_compressed = down_wire.size();
        report.up_raw += cs.up_raw;
        report.up_compressed += cs.up_compressed;
        report.down_raw += cs.down_raw;
        report.down_compressed += cs.down_compressed;
    }
    for (std::size_t i = 0; i < outcomes.size(); ++i) {
        report.clients[i].train_loss = outcomes[i].loss;
    }
    report.measured_sparsity = up_stats.measured_sparsity();
    report.aggregate_node = current_node_;
    return report;
}

} // namespace nncfl::fl
