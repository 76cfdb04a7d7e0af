#pragma once

#include "nncfl/bitstream.hpp"
#include "nncfl/model.hpp"
#include "nncfl/rng.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <vector>

namespace nncfl::fl {

// A round in which no client delivered an update.
class RoundError : public Error {
public:
    using Error::Error;
};

enum class Optimizer { adamw, sgd };

struct LocalTrainConfig {
    // Passes over the client's shard per round; fractions are allowed and
    // continue where the previous round stopped.
    double local_epochs = 1.0;
    std::size_t batch_size = 8;
    Optimizer optimizer = Optimizer::adamw;
    lm::AdamConfig adam;  // adam.lr is also the SGD learning rate
};

// Optimizer steps one round takes on a shard of `samples` records:
// 0 when epochs == 0, otherwise max(1, round(epochs * samples / batch)).
std::size_t local_steps(std::size_t samples, double epochs, std::size_t batch_size);

// Computes the minibatch loss at `weights` and writes its gradient to `grads`.
using GradientFn = std::function<double(const ModelWeights& weights, ModelWeights& grads)>;

// Sets local <- global, takes `steps` optimizer steps, returns local - global.
// Throws NumericError when a loss or gradient is non-finite.
ModelWeights local_train(ModelWeights& local, lm::AdamState& optimizer, const ModelWeights& global,
                         std::size_t steps, const LocalTrainConfig& config, const GradientFn& grad_fn);

struct ClientState {
    std::size_t id = 0;
    std::vector<lm::TokenSequence> shard;
    std::size_t sample_count = 0;  // == shard.size()
    ModelWeights weights;
    lm::AdamState optimizer;
    Rng rng{0};
    std::vector<std::size_t> order;  // current pass over the shard
    std::size_t cursor = 0;
    ModelWeights residual;  // uplink error-feedback memory (empty when unused)
    double last_loss = 0.0;  // mean minibatch loss of the latest local_train
};

ClientState make_client(std::size_t id, std::vector<lm::TokenSequence> shard, std::uint64_t seed);

// Local training of the language model on the client's own shard.
ModelWeights local_train(ClientState& client, const lm::ModelConfig& model,
                         const ModelWeights& global, const LocalTrainConfig& config);

// sum_i (w_i / sum_j w_j) * update_i, accumulated in double in the given
// order, rounded to float once per element.
ModelWeights aggregate_delta(std::span<const ModelWeights> updates, std::span<const double> weights);

// global + aggregate_delta(updates, weights).
ModelWeights aggregate(const ModelWeights& global, std::span<const ModelWeights> updates,
                       std::span<const double> weights);

// ---------------------------------------------------------------------------
// Parameter update tree

enum class NodeKind : std::uint8_t { root, client_update, aggregate };

struct PutNode {
    std::uint64_t id = 0;
    std::uint64_t parent = nnc::kNoParent;
    NodeKind kind = NodeKind::root;
    int round = 0;
    std::vector<std::size_t> clients;
    // Serialized NncBitstream, or a serialized checkpoint for the root.
    std::vector<std::uint8_t> payload;
};

// Versioned lineage: the root carries the base model, every other node a
// coded differential update relative to its parent. Ids are allocated in
// increasing order and never reused.
class ParameterUpdateTree {
public:
    static constexpr std::uint64_t kRootId = 0;

    explicit ParameterUpdateTree(const ModelWeights& base);

    std::uint64_t next_id() const { return next_id_; }
    std::size_t size() const { return nodes_.size(); }
    bool contains(std::uint64_t id) const { return nodes_.contains(id); }
    const PutNode& node(std::uint64_t id) const;
    const std::map<std::uint64_t, PutNode>& nodes() const { return nodes_; }

    // Adds a stream whose node_id must equal next_id() and whose parent must
    // exist. Returns the new id.
    std::uint64_t insert(const nnc::NncBitstream& stream, NodeKind kind, int round,
                         std::vector<std::size_t> clients);

    // Base model plus every decoded update on the root -> id path, in order.
    ModelWeights resolve(std::uint64_t id) const;

    // Directory layout: manifest.json, 0.ckpt (root), <id>.nnfl per update.
    void save(const std::filesystem::path& dir) const;
    static ParameterUpdateTree load(const std::filesystem::path& dir);

private:
    ParameterUpdateTree() = default;
    std::vector<std::uint64_t> path_to(std::uint64_t id) const;
    void validate() const;

    std::map<std::uint64_t, PutNode> nodes_;
    std::uint64_t next_id_ = 1;
    ModelWeights base_;
};

// Assigns node_id = tree.next_id() and parent_id = parent, then inserts.
std::uint64_t put_insert(ParameterUpdateTree& tree, std::uint64_t parent, nnc::NncBitstream stream,
                         NodeKind kind = NodeKind::client_update, int round = 0,
                         std::vector<std::size_t> clients = {});
ModelWeights put_resolve(const ParameterUpdateTree& tree, std::uint64_t id);

// ---------------------------------------------------------------------------
// Orchestration

enum class Weighting { samples, uniform };

struct FederationConfig {
    nnc::CodecConfig codec;
    bool compress_downlink = true;
    bool uplink_error_feedback = false;
    bool downlink_error_feedback = true;
    Weighting weighting = Weighting::samples;
    LocalTrainConfig train;
    // Per-round independent drop chance for every client.
    double drop_probability = 0.0;
    // (round, client) pairs forced to fail.
    std::set<std::pair<int, std::size_t>> forced_failures;
    // Async mode: listed clients train from the previous round's global and
    // upload against the previous aggregate node (staleness 1).
    bool async_mode = false;
    std::set<std::size_t> stale_clients;
    std::uint64_t seed = 0;
    // Worker threads for local training; results do not depend on it.
    std::size_t threads = 1;
};

struct ClientRoundStats {
    std::size_t client = 0;
    bool live = false;
    std::size_t up_raw = 0;
    std::size_t up_compressed = 0;
    std::size_t down_raw = 0;
    std::size_t down_compressed = 0;
    double train_loss = 0.0;
};

struct RoundReport {
    int round = 0;
    std::vector<ClientRoundStats> clients;
    std::size_t up_raw = 0;
    std::size_t up_compressed = 0;
    std::size_t down_raw = 0;
    std::size_t down_compressed = 0;
    double measured_sparsity = 0.0;  // zero fraction over this round's uplink levels
    std::uint64_t aggregate_node = 0;
};

class Federation {
public:
    Federation(lm::ModelConfig model, const ModelWeights& base, std::vector<ClientState> clients,
               FederationConfig config);

    // Runs one synchronous round. Throws RoundError (global unchanged) when no
    // client delivers an update.
    RoundReport run_round();

    // Decodes an uplink stream after checking that its parent is the current
    // aggregate node (or, in async mode, the previous one). Throws
    // IntegrityError for any other parent.
    ModelWeights accept_update(const nnc::NncBitstream& stream) const;

    const ModelWeights& global() const { return global_; }
    const ParameterUpdateTree& tree() const { return tree_; }
    std::uint64_t latest_aggregate() const { return current_node_; }
    int rounds_completed() const { return round_; }
    const std::vector<ClientState>& clients() const { return clients_; }
    std::size_t parameter_count() const { return global_.parameter_count(); }

private:
    lm::ModelConfig model_;
    FederationConfig config_;
    std::vector<ClientState> clients_;
    ModelWeights global_;
    ModelWeights previous_global_;
    ModelWeights downlink_residual_;
    ParameterUpdateTree tree_;
    std::uint64_t current_node_ = ParameterUpdateTree::kRootId;
    std::uint64_t previous_node_ = ParameterUpdateTree::kRootId;
    Rng failure_rng_;
    int round_ = 0;
};

} // namespace nncfl::fl
