#include "nncfl/byte_io.hpp"
#include "nncfl/fedsim.hpp"

#include "reference_fedavg.hpp"

#include "doctest.h"

#include "json.hpp"

#include <cmath>
#include <filesystem>
#include <limits>

using namespace nncfl;
using namespace nncfl::fl;

namespace {

const lm::ModelConfig kModel{8, 1, 2, 11, 8, 12};

ModelWeights scalar(float v) {
    ModelWeights w;
    w.push_back(Tensor("w", {1}, {v}));
    return w;
}

std::vector<std::vector<lm::TokenSequence>> make_shards(std::uint64_t seed, std::vector<std::size_t> sizes) {
    Rng rng(seed, 5);
    std::vector<std::vector<lm::TokenSequence>> out;
    for (const auto n : sizes) {
        std::vector<lm::TokenSequence> shard;
        for (std::size_t i = 0; i < n; ++i) {
            lm::TokenSequence s{1};
            const std::size_t len = 3 + rng.below(5);
            for (std::size_t k = 0; k < len; ++k) {
                s.push_back(static_cast<lm::TokenId>(4 + rng.below(7)));
            }
            s.push_back(2);
            shard.push_back(std::move(s));
        }
        out.push_back(std::move(shard));
    }
    return out;
}

ModelWeights base_weights(std::uint64_t seed) {
    Rng r(seed, streams::kInit);
    return lm::init_weights(kModel, r);
}

std::vector<ClientState> make_clients(const std::vector<std::vector<lm::TokenSequence>>& shards,
                                      std::uint64_t seed) {
    std::vector<ClientState> out;
    for (std::size_t c = 0; c < shards.size(); ++c) {
        out.push_back(make_client(c, shards[c], seed));
    }
    return out;
}

FederationConfig small_config(std::uint64_t seed) {
    FederationConfig fc;
    fc.seed = seed;
    fc.train.local_epochs = 1.0;
    fc.train.batch_size = 2;
    fc.train.adam.lr = 1e-2f;
    return fc;
}

reference::Setup reference_setup(const std::vector<std::vector<lm::TokenSequence>>& shards,
                                 const FederationConfig& fc) {
    reference::Setup s;
    s.model = kModel;
    s.shards = shards;
    s.seed = fc.seed;
    s.epochs = fc.train.local_epochs;
    s.batch = fc.train.batch_size;
    s.adam = fc.train.adam;
    s.uniform = fc.weighting == Weighting::uniform;
    s.failures = fc.forced_failures;
    return s;
}

} // namespace

TEST_CASE("local step count") {
    CHECK(local_steps(100, 0.0, 8) == 0);
    CHECK(local_steps(100, 1.0, 8) == 13);
    CHECK(local_steps(100, 0.01, 8) == 1);
    CHECK(local_steps(8000, 0.02, 2) == 80);
    CHECK_THROWS_AS(local_steps(10, 1.0, 0), ArgumentError);
    CHECK_THROWS_AS(local_steps(10, -1.0, 1), ArgumentError);
}

TEST_CASE("generic local training") {
    // f(w) = 0.5 * a * (w - c)^2
    const double a = 3.0, c = 2.0;
    const GradientFn quad = [&](const ModelWeights& w, ModelWeights& g) {
        const double x = w[0][0];
        g[0][0] = static_cast<float>(a * (x - c));
        return 0.5 * a * (x - c) * (x - c);
    };
    const ModelWeights global = scalar(0.5f);
    LocalTrainConfig cfg;
    cfg.optimizer = Optimizer::sgd;
    cfg.adam.lr = 0.1f;

    ModelWeights local;
    lm::AdamState opt;
    SUBCASE("zero steps") {
        const auto d = local_train(local, opt, global, 0, cfg, quad);
        CHECK(d[0][0] == 0.0f);
    }
    SUBCASE("lr = 0") {
        cfg.adam.lr = 0.0f;
        CHECK(local_train(local, opt, global, 5, cfg, quad)[0][0] == 0.0f);
        cfg.optimizer = Optimizer::adamw;
        CHECK(local_train(local, opt, global, 5, cfg, quad)[0][0] == 0.0f);
    }
    SUBCASE("one SGD step on the quadratic") {
        const auto d = local_train(local, opt, global, 1, cfg, quad);
        CHECK(d[0][0] == doctest::Approx(-0.1 * a * (0.5 - c)).epsilon(1e-6));
        CHECK(local[0][0] == doctest::Approx(0.5 + 0.45).epsilon(1e-6));
    }
    SUBCASE("non-finite loss") {
        const GradientFn nan_fn = [](const ModelWeights&, ModelWeights&) {
            return std::numeric_limits<double>::quiet_NaN();
        };
        CHECK_THROWS_AS(local_train(local, opt, global, 1, cfg, nan_fn), NumericError);
    }
}

TEST_CASE("client training from epochs = 0 returns zeros") {
    const auto shards = make_shards(1, {6});
    auto client = make_client(0, shards[0], 1);
    LocalTrainConfig cfg;
    cfg.local_epochs = 0.0;
    const auto d = local_train(client, kModel, base_weights(1), cfg);
    CHECK(d == base_weights(1).zeros_like());
}

TEST_CASE("aggregation examples") {
    const ModelWeights w = scalar(1.0f);
    SUBCASE("single client") {
        const std::vector<ModelWeights> u{scalar(0.25f)};
        const std::vector<double> n{7};
        CHECK(aggregate(w, u, n)[0][0] == 1.25f);
    }
    SUBCASE("cancellation") {
        const std::vector<ModelWeights> u{scalar(1.0f), scalar(-1.0f)};
        const std::vector<double> n{5, 5};
        CHECK(aggregate(w, u, n)[0][0] == 1.0f);
    }
    SUBCASE("weighted mean") {
        const std::vector<ModelWeights> u{scalar(4.0f), scalar(0.0f)};
        const std::vector<double> n{3, 1};
        CHECK(aggregate(w, u, n)[0][0] == 4.0f);
    }
    SUBCASE("missing tensor") {
        ModelWeights two = scalar(1.0f);
        two.push_back(Tensor("v", {1}, {1.0f}));
        const std::vector<ModelWeights> u{scalar(1.0f), two};
        const std::vector<double> n{1, 1};
        CHECK_THROWS_AS(aggregate(w, u, n), SchemaError);
    }
    SUBCASE("bad weights") {
        const std::vector<ModelWeights> u{scalar(1.0f)};
        CHECK_THROWS_AS(aggregate(w, u, std::vector<double>{0}), ArgumentError);
        CHECK_THROWS_AS(aggregate(w, u, std::vector<double>{1, 2}), ArgumentError);
        CHECK_THROWS_AS(aggregate(w, u, std::vector<double>{-1}), ArgumentError);
    }
}

TEST_CASE("equal weights give the plain mean") {
    Rng rng(2);
    std::vector<ModelWeights> u;
    for (int i = 0; i < 5; ++i) {
        ModelWeights m;
        const auto t = rng_normal(rng, 50, 0.0f, 1.0f);
        m.push_back(Tensor("t", {50}, std::vector<float>(t.values().begin(), t.values().end())));
        u.push_back(std::move(m));
    }
    const auto d = aggregate_delta(u, std::vector<double>(5, 17.0));
    for (std::size_t j = 0; j < 50; ++j) {
        double mean = 0;
        for (const auto& m : u) {
            mean += m[0][j];
        }
        mean /= 5;
        CHECK(std::abs(d[0][j] - mean) <= 1e-7 * std::max(1.0, std::abs(mean)));
    }
}

TEST_CASE("update tree: resolve, chains and branches") {
    const ModelWeights base = scalar(1.0f);
    ParameterUpdateTree tree(base);
    CHECK(tree.resolve(ParameterUpdateTree::kRootId) == base);

    nnc::CodecConfig raw;
    raw.bypass = true;
    const auto u1 = put_insert(tree, 0, nnc::encode_update(scalar(0.5f), raw, 0, 0));
    const auto u2 = put_insert(tree, u1, nnc::encode_update(scalar(0.25f), raw, 0, 0));
    const auto b1 = put_insert(tree, 0, nnc::encode_update(scalar(-2.0f), raw, 0, 0));
    CHECK(tree.resolve(u2)[0][0] == 1.75f);
    CHECK(tree.resolve(u1)[0][0] == 1.5f);
    CHECK(tree.resolve(b1)[0][0] == -1.0f);
    CHECK(put_resolve(tree, u2) == tree.resolve(u2));
    CHECK(tree.size() == 4);

    CHECK_THROWS_AS(tree.resolve(99), LookupError);
    CHECK_THROWS_AS(put_insert(tree, 99, nnc::encode_update(scalar(1.0f), raw, 0, 0)), LookupError);
    auto wrong_id = nnc::encode_update(scalar(1.0f), raw, 42, 0);
    CHECK_THROWS_AS(tree.insert(wrong_id, NodeKind::client_update, 0, {}), IntegrityError);
    // ids are never reused
    CHECK(tree.next_id() == 4);
}

TEST_CASE("update tree: coded chain resolves to the sum of decoded updates") {
    Rng rng(3);
    const ModelWeights base = base_weights(3);
    ParameterUpdateTree tree(base);
    ModelWeights expected = base;
    std::uint64_t parent = 0;
    for (int i = 0; i < 3; ++i) {
        ModelWeights u = base.zeros_like();
        for (auto& t : u) {
            for (auto& x : t.values()) {
                x = static_cast<float>(0.01 * rng.normal());
            }
        }
        const auto s = nnc::encode_update(u, nnc::CodecConfig{-22, 2, 0.5, false}, tree.next_id(), parent);
        add_in_place(expected, nnc::decode_update(s));
        parent = tree.insert(s, NodeKind::aggregate, i + 1, {});
    }
    CHECK(tree.resolve(parent) == expected);
}

TEST_CASE("update tree persistence and integrity") {
    const auto dir = std::filesystem::temp_directory_path() / "nncfl_put_test";
    std::filesystem::remove_all(dir);
    ParameterUpdateTree tree(base_weights(4));
    nnc::CodecConfig cfg{-20, 2, 0.0, false};
    ModelWeights u = base_weights(5);
    const auto a = put_insert(tree, 0, nnc::encode_update(u, cfg, 0, 0), NodeKind::client_update, 1, {0});
    const auto b = put_insert(tree, a, nnc::encode_update(u, cfg, 0, 0), NodeKind::aggregate, 1, {0});
    tree.save(dir);

    const auto loaded = ParameterUpdateTree::load(dir);
    CHECK(loaded.size() == tree.size());
    CHECK(loaded.next_id() == tree.next_id());
    CHECK(loaded.resolve(b) == tree.resolve(b));
    CHECK(loaded.node(b).clients == std::vector<std::size_t>{0});

    SUBCASE("tampered payload") {
        auto bytes = read_file(dir / "1.nnfl");
        bytes.back() ^= 0x55;
        write_file(dir / "1.nnfl", bytes);
        CHECK_THROWS_AS(ParameterUpdateTree::load(dir), IntegrityError);
    }
    SUBCASE("cycle") {
        // rewrite nodes 1 and 2 to point at each other, hashes kept valid
        auto manifest_bytes = read_file(dir / "manifest.json");
        auto manifest = nlohmann::json::parse(manifest_bytes.begin(), manifest_bytes.end());
        for (auto& n : manifest["nodes"]) {
            const auto id = n["id"].get<std::uint64_t>();
            if (id == 0) {
                continue;
            }
            const std::uint64_t other = id == 1 ? 2 : 1;
            auto s = nnc::NncBitstream::load(dir / n["file"].get<std::string>());
            s.parent_id = other;
            const auto bytes = s.serialize();
            write_file(dir / n["file"].get<std::string>(), bytes);
            n["parent"] = other;
            char hex[17];
            std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(fnv1a64(bytes)));
            n["fnv1a64"] = hex;
        }
        const std::string text = manifest.dump();
        write_file(dir / "manifest.json",
                   std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
        CHECK_THROWS_AS(ParameterUpdateTree::load(dir), IntegrityError);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("bypass federation equals plain FedAvg bit for bit") {
    const auto shards = make_shards(6, {9, 5, 3});
    auto fc = small_config(6);
    fc.codec.bypass = true;
    Federation fed(kModel, base_weights(6), make_clients(shards, 6), fc);
    for (int r = 0; r < 3; ++r) {
        fed.run_round();
    }
    const auto ref = reference::fedavg(reference_setup(shards, fc), base_weights(6), 3);
    CHECK(fed.global() == ref);

    SUBCASE("uniform weighting") {
        auto fu = fc;
        fu.weighting = Weighting::uniform;
        Federation f2(kModel, base_weights(6), make_clients(shards, 6), fu);
        f2.run_round();
        CHECK(f2.global() == reference::fedavg(reference_setup(shards, fu), base_weights(6), 1));
    }
}

TEST_CASE("a failed client is left out and the weights renormalize") {
    const auto shards = make_shards(7, {9, 5, 3});
    auto fc = small_config(7);
    fc.codec.bypass = true;
    fc.forced_failures = {{1, 1}, {2, 0}};
    Federation fed(kModel, base_weights(7), make_clients(shards, 7), fc);
    const auto r1 = fed.run_round();
    CHECK_FALSE(r1.clients[1].live);
    CHECK(r1.clients[1].up_raw == 0);
    fed.run_round();
    CHECK(fed.global() == reference::fedavg(reference_setup(shards, fc), base_weights(7), 2));
    // node count: root + (2 uploads + aggregate) per round
    CHECK(fed.tree().size() == 1 + 2 * 3);
}

TEST_CASE("a round with no live client fails and changes nothing") {
    const auto shards = make_shards(8, {4, 4});
    auto fc = small_config(8);
    fc.forced_failures = {{1, 0}, {1, 1}};
    Federation fed(kModel, base_weights(8), make_clients(shards, 8), fc);
    CHECK_THROWS_AS(fed.run_round(), RoundError);
    CHECK(fed.global() == base_weights(8));
    CHECK(fed.rounds_completed() == 0);
    CHECK(fed.tree().size() == 1);
}

TEST_CASE("diverging clients are marked failed") {
    const auto shards = make_shards(9, {4, 4});
    auto fc = small_config(9);
    fc.train.adam.lr = 1e30f;
    fc.train.local_epochs = 3.0;
    Federation fed(kModel, base_weights(9), make_clients(shards, 9), fc);
    CHECK_THROWS_AS(fed.run_round(), RoundError);
}

TEST_CASE("compressed federation: tree size, resolve, byte accounting, determinism") {
    const auto shards = make_shards(10, {12, 7, 4, 2});
    auto fc = small_config(10);
    fc.codec = nnc::CodecConfig{-22, 2, 0.6, false};
    fc.uplink_error_feedback = true;
    Federation fed(kModel, base_weights(10), make_clients(shards, 10), fc);
    Federation twin(kModel, base_weights(10), make_clients(shards, 10), fc);
    const std::size_t params = lm::param_count(kModel);
    const int rounds = 4;
    for (int r = 0; r < rounds; ++r) {
        const auto rep = fed.run_round();
        twin.run_round();
        CHECK(rep.up_raw == 4 * params * 4);
        CHECK(rep.down_raw == 4 * params * 4);
        std::size_t up = 0;
        for (const auto& c : rep.clients) {
            up += c.up_compressed;
            CHECK(c.down_compressed == fed.tree().node(rep.aggregate_node).payload.size());
        }
        CHECK(rep.up_compressed == up);
        CHECK(rep.measured_sparsity >= 0.6);
    }
    CHECK(fed.tree().size() == 1 + rounds * (4 + 1));
    CHECK(fed.tree().resolve(fed.latest_aggregate()) == fed.global());
    CHECK(fed.global() == twin.global());
    // the aggregate chain hangs off the root; uploads hang off aggregates
    for (const auto& [id, n] : fed.tree().nodes()) {
        if (n.kind == NodeKind::client_update) {
            CHECK((n.parent == 0 || fed.tree().node(n.parent).kind == NodeKind::aggregate));
        }
    }
}

TEST_CASE("worker threads do not change results") {
    const auto shards = make_shards(11, {6, 5, 4});
    auto fc = small_config(11);
    fc.codec = nnc::CodecConfig{-24, 2, 0.0, false};
    Federation one(kModel, base_weights(11), make_clients(shards, 11), fc);
    fc.threads = 3;
    Federation three(kModel, base_weights(11), make_clients(shards, 11), fc);
    for (int r = 0; r < 2; ++r) {
        one.run_round();
        three.run_round();
    }
    CHECK(one.global() == three.global());
}

TEST_CASE("parent guard and bounded staleness") {
    const auto shards = make_shards(12, {5, 5});
    auto fc = small_config(12);
    fc.async_mode = true;
    fc.stale_clients = {1};
    Federation fed(kModel, base_weights(12), make_clients(shards, 12), fc);
    fed.run_round();
    fed.run_round();
    const std::uint64_t latest = fed.latest_aggregate();
    // round 2's stale upload references round 0's aggregate (the root)
    bool saw_stale = false;
    for (const auto& [id, n] : fed.tree().nodes()) {
        if (n.kind == NodeKind::client_update && n.round == 2 && n.clients == std::vector<std::size_t>{1}) {
            saw_stale = n.parent != fed.tree().node(latest).parent;
        }
    }
    CHECK(saw_stale);
    CHECK(fed.tree().resolve(latest) == fed.global());

    const ModelWeights zero = base_weights(12).zeros_like();
    const auto current = nnc::encode_update(zero, fc.codec, 100, latest);
    CHECK_NOTHROW(fed.accept_update(current));
    const auto previous = nnc::encode_update(zero, fc.codec, 100, fed.tree().node(latest).parent);
    CHECK_NOTHROW(fed.accept_update(previous));
    const auto ancient = nnc::encode_update(zero, fc.codec, 100, 0);
    CHECK_THROWS_AS(fed.accept_update(ancient), IntegrityError);

    auto sync = small_config(12);
    Federation strict(kModel, base_weights(12), make_clients(shards, 12), sync);
    strict.run_round();
    const auto stale = nnc::encode_update(zero, sync.codec, 100, 0);
    CHECK_THROWS_AS(strict.accept_update(stale), IntegrityError);
}
