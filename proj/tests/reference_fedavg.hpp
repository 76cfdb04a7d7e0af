#pragma once

// Plain FedAvg over the language model with no codec anywhere: the oracle for
// codec-bypass runs. Client sampling follows the documented scheme (a fresh
// Fisher-Yates permutation per pass from the client's own stream).

#include "nncfl/model.hpp"
#include "nncfl/rng.hpp"

#include <cmath>
#include <set>
#include <utility>
#include <vector>

namespace reference {

struct Client {
    std::vector<nncfl::lm::TokenSequence> shard;
    nncfl::lm::AdamState opt;
    nncfl::Rng rng{0};
    std::vector<std::size_t> order;
    std::size_t cursor = 0;

    std::vector<nncfl::lm::TokenSequence> draw(std::size_t batch) {
        std::vector<nncfl::lm::TokenSequence> out;
        while (out.size() < batch) {
            if (cursor == order.size()) {
                order.resize(shard.size());
                for (std::size_t i = 0; i < order.size(); ++i) {
                    order[i] = i;
                }
                for (std::size_t k = order.size(); k > 1; --k) {
                    std::swap(order[k - 1], order[rng.below(static_cast<std::uint32_t>(k))]);
                }
                cursor = 0;
            }
            out.push_back(shard[order[cursor++]]);
        }
        return out;
    }
};

struct Setup {
    nncfl::lm::ModelConfig model;
    std::vector<std::vector<nncfl::lm::TokenSequence>> shards;
    std::uint64_t seed = 0;
    double epochs = 1.0;
    std::size_t batch = 1;
    nncfl::lm::AdamConfig adam;
    bool uniform = false;
    std::set<std::pair<int, std::size_t>> failures;  // (round, client)
};

inline nncfl::ModelWeights fedavg(const Setup& s, nncfl::ModelWeights global, int rounds) {
    using namespace nncfl;
    std::vector<Client> clients(s.shards.size());
    for (std::size_t c = 0; c < clients.size(); ++c) {
        clients[c].shard = s.shards[c];
        clients[c].opt = lm::make_adam_state(global);
        clients[c].rng = Rng(s.seed, streams::kClientBase + c);
    }
    for (int r = 1; r <= rounds; ++r) {
        std::vector<ModelWeights> deltas;
        std::vector<double> n;
        for (std::size_t c = 0; c < clients.size(); ++c) {
            if (s.failures.contains({r, c})) {
                continue;
            }
            const double exact = s.epochs * static_cast<double>(clients[c].shard.size()) /
                                 static_cast<double>(s.batch);
            const std::size_t steps =
                s.epochs == 0.0 ? 0 : std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(exact)));
            ModelWeights local = global;
            for (std::size_t k = 0; k < steps; ++k) {
                const auto b = lm::make_batch(clients[c].draw(s.batch), static_cast<std::size_t>(s.model.seq_len));
                auto lg = lm::loss_and_grads(s.model, local, b);
                lm::adamw_step(local, lg.grads, clients[c].opt, s.adam);
            }
            deltas.push_back(difference(local, global));
            n.push_back(s.uniform ? 1.0 : static_cast<double>(clients[c].shard.size()));
        }
        double total = 0;
        for (const double x : n) {
            total += x;
        }
        for (std::size_t t = 0; t < global.count(); ++t) {
            auto g = global[t].values();
            for (std::size_t j = 0; j < g.size(); ++j) {
                double acc = 0;
                for (std::size_t i = 0; i < deltas.size(); ++i) {
                    acc += (n[i] / total) * static_cast<double>(deltas[i][t][j]);
                }
                g[j] += static_cast<float>(acc);
            }
        }
    }
    return global;
}

} // namespace reference
