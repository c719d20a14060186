#include <doctest.h>

#include <chrono>
#include <cstring>
#include <fstream>

#include "plaqnet/error.hpp"
#include "plaqnet/model.hpp"
#include "support.hpp"

using namespace plaqnet;
using testing::random_tensor;

namespace {

template <typename F>
ErrorKind error_kind_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("no error raised");
    return ErrorKind::Usage;
}

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("forward shape trace on a single patch") {
    auto net = build_plaquenet<float>(1);
    Rng rng(2);
    ShapeTrace trace;
    const auto probs = net.forward(random_tensor<float>({1, 1, 51, 51}, rng, 0, 1), Mode::Inference, rng, &trace);
    const ShapeTrace expected = {
        {"input", {1, 1, 51, 51}},   {"block1", {1, 32, 51, 51}},  {"block2", {1, 32, 51, 51}},
        {"block3", {1, 32, 51, 51}}, {"pool1", {1, 32, 25, 25}},   {"block4", {1, 64, 25, 25}},
        {"block5", {1, 64, 25, 25}}, {"block6", {1, 64, 25, 25}},  {"pool2", {1, 64, 12, 12}},
        {"block7", {1, 128, 12, 12}}, {"block8", {1, 128, 12, 12}}, {"block9", {1, 128, 12, 12}},
        {"global_pool", {1, 128}},   {"fc1", {1, 512}},            {"fc2", {1, 5}},
        {"softmax", {1, 5}},
    };
    CHECK(trace == expected);
    CHECK(probs.shape() == Shape{1, 5});
}

TEST_CASE("probabilities sum to one in both modes") {
    auto net = build_plaquenet<float>(3);
    Rng rng(4);
    const auto x = random_tensor<float>({4, 1, 51, 51}, rng, 0, 1);
    for (Mode mode : {Mode::Train, Mode::Inference}) {
        const auto p = net.forward(x, mode, rng);
        for (std::size_t i = 0; i < 4; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < 5; ++j) {
                CHECK(p[i * 5 + j] > 0.0f);
                s += p[i * 5 + j];
            }
            CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("same seed gives identical parameters") {
    const auto a = build_plaquenet<float>(42);
    const auto b = build_plaquenet<float>(42);
    const auto c = build_plaquenet<float>(43);
    const auto aa = a.arrays(), bb = b.arrays(), cc = c.arrays();
    bool any_diff = false;
    for (std::size_t i = 0; i < aa.size(); ++i) {
        CHECK(std::memcmp(aa[i].tensor->data(), bb[i].tensor->data(), aa[i].tensor->size() * sizeof(float)) == 0);
        if (aa[i].name.find("weight") != std::string::npos) {
            any_diff |= std::memcmp(aa[i].tensor->data(), cc[i].tensor->data(), aa[i].tensor->size() * 4) != 0;
        }
    }
    CHECK(any_diff);
}

TEST_CASE("initialisation statistics") {
    auto net = build_plaquenet<double>(5);
    // Sample std of the largest conv weight tensor against sqrt(2 / fan_in).
    const auto& w = net.blocks()[8].conv.weight;
    double mean = 0, sq = 0;
    for (double v : w.values()) mean += v;
    mean /= static_cast<double>(w.size());
    for (double v : w.values()) sq += (v - mean) * (v - mean);
    const double sd = std::sqrt(sq / static_cast<double>(w.size()));
    CHECK(sd == doctest::Approx(std::sqrt(2.0 / (128 * 9))).epsilon(0.01));
    for (const auto& b : net.blocks()) {
        for (double v : b.conv.bias.values()) CHECK(v == 0.0);
        for (double v : b.bn.gamma.values()) CHECK(v == 1.0);
        for (double v : b.bn.beta.values()) CHECK(v == 0.0);
    }
}

TEST_CASE("trainable parameter count") {
    const auto net = build_plaquenet<float>(0);
    // Independent per-layer accounting: conv weights + conv bias + gamma + beta.
    auto block = [](std::size_t in, std::size_t out) { return out * in * 9 + out + out + out; };
    const std::size_t stage1 = block(1, 32) + block(32, 32) + block(32, 32);
    const std::size_t stage2 = block(32, 64) + block(64, 64) + block(64, 64);
    const std::size_t stage3 = block(64, 128) + block(128, 128) + block(128, 128);
    const std::size_t fc1 = 128 * 512 + 512;
    const std::size_t fc2 = 512 * 5 + 5;
    CHECK(stage1 == 19008);
    CHECK(stage2 == 92736);
    CHECK(stage3 == 369792);
    CHECK(fc1 == 66048);
    CHECK(fc2 == 2565);
    CHECK(stage1 + stage2 + stage3 + fc1 + fc2 == 550149);
    CHECK(count_trainable_params(net) == 550149);
    CHECK(net.spec().trainable_param_count() == 550149);
    CHECK(kReferenceParamCount - count_trainable_params(net) == 576);
}

TEST_CASE("gradient arrays mirror the trainable arrays") {
    auto net = build_plaquenet<float>(6);
    Rng rng(7);
    const auto x = random_tensor<float>({2, 1, 51, 51}, rng, 0, 1);
    net.forward(x, Mode::Train, rng);
    net.backward(random_tensor<float>({2, 5}, rng));
    std::size_t grad_total = 0;
    for (const auto& a : net.arrays()) {
        CHECK(a.tensor->has_grad() == a.trainable);
        if (a.trainable) {
            CHECK(a.tensor->grad().size() == a.tensor->size());
            grad_total += a.tensor->grad().size();
        }
    }
    CHECK(grad_total == 550149);
}

TEST_CASE("architecture deviations are construction errors") {
    auto spec = ArchitectureSpec::plaquenet();
    spec.layers[1].out = 48;
    CHECK(error_kind_of([&] { PlaqueNet<float> net(spec); }) == ErrorKind::Architecture);
    spec = ArchitectureSpec::plaquenet();
    std::swap(spec.layers[3], spec.layers[4]);
    CHECK(error_kind_of([&] { PlaqueNet<float> net(spec); }) == ErrorKind::Architecture);
    spec = ArchitectureSpec::plaquenet();
    spec.layers.pop_back();
    CHECK(error_kind_of([&] { PlaqueNet<float> net(spec); }) == ErrorKind::Architecture);
    spec = ArchitectureSpec::plaquenet();
    spec.patch_size = 33;
    CHECK(error_kind_of([&] { PlaqueNet<float> net(spec); }) == ErrorKind::Architecture);
}

TEST_CASE("architecture fingerprint is pinned") {
    const auto spec = ArchitectureSpec::plaquenet();
    CHECK(spec.fingerprint() == ArchitectureSpec::plaquenet().fingerprint());
    CHECK(spec.fingerprint() == 0x726f920c4914b224ULL);
}

TEST_CASE("backward without a train-mode forward is a usage error") {
    auto net = build_plaquenet<float>(8);
    Rng rng(9);
    CHECK(error_kind_of([&] { net.backward(Tensor<float>({1, 5})); }) == ErrorKind::Usage);
    net.forward(random_tensor<float>({1, 1, 51, 51}, rng), Mode::Inference, rng);
    CHECK(error_kind_of([&] { net.backward(Tensor<float>({1, 5})); }) == ErrorKind::Usage);
}

TEST_CASE("checkpoint round trip") {
    const auto dir = testing::scratch_dir("ckpt");
    auto net = build_plaquenet<float>(10);
    Rng rng(11);
    const auto x = random_tensor<float>({3, 1, 51, 51}, rng, 0, 1);
    // A train step so running statistics differ from their initial values.
    net.forward(x, Mode::Train, rng);
    const auto before = net.predict(x);
    const CheckpointMeta meta{1234, 0.8125, 77};
    save_checkpoint(net, meta, dir / "a.ckpt");
    auto loaded = load_checkpoint(dir / "a.ckpt");
    CHECK(loaded.meta == meta);
    const auto src = net.arrays();
    const auto dst = loaded.net.arrays();
    for (std::size_t i = 0; i < src.size(); ++i) {
        CHECK(src[i].name == dst[i].name);
        CHECK(std::memcmp(src[i].tensor->data(), dst[i].tensor->data(), src[i].tensor->size() * 4) == 0);
    }
    const auto after = loaded.net.predict(x);
    CHECK(std::memcmp(before.data(), after.data(), before.size() * 4) == 0);
    save_checkpoint(loaded.net, loaded.meta, dir / "b.ckpt");
    CHECK(read_bytes(dir / "a.ckpt") == read_bytes(dir / "b.ckpt"));
}

TEST_CASE("checkpoint failure modes are distinct") {
    const auto net = build_plaquenet<float>(12);
    const auto bytes = encode_checkpoint(net, {});

    auto truncated = bytes;
    truncated.resize(bytes.size() / 2);
    CHECK(error_kind_of([&] { decode_checkpoint(truncated); }) == ErrorKind::CorruptCheckpoint);
    truncated.resize(5);
    CHECK(error_kind_of([&] { decode_checkpoint(truncated); }) == ErrorKind::CorruptCheckpoint);

    auto version = bytes;
    version[8] = 2;
    CHECK(error_kind_of([&] { decode_checkpoint(version); }) == ErrorKind::VersionMismatch);

    auto fingerprint = bytes;
    fingerprint[12] ^= 0xff;
    CHECK(error_kind_of([&] { decode_checkpoint(fingerprint); }) == ErrorKind::FingerprintMismatch);

    auto trailing = bytes;
    trailing.push_back(0);
    CHECK(error_kind_of([&] { decode_checkpoint(trailing); }) == ErrorKind::CorruptCheckpoint);

    CHECK(error_kind_of([&] { load_checkpoint("/nonexistent/dir/x.ckpt"); }) == ErrorKind::Io);
}

TEST_CASE("composed network gradient matches finite differences") {
    // A +-eps perturbation that flips any ReLU or moves any max-pool argmax
    // straddles a kink. For such entries the step is reduced to 1e-6; entries
    // that still straddle a kink are skipped and another one is drawn.
    auto net = build_plaquenet<double>(13);
    Rng data(14);
    const auto x = random_tensor({2, 1, 51, 51}, data, 0, 1);
    const auto r = random_tensor({2, 5}, data);
    const std::uint64_t dropout_seed = 15;
    auto eval = [&](std::uint64_t& signature) {
        Rng rng(dropout_seed);
        const double v = testing::probe(net.forward(x, Mode::Train, rng), r);
        signature = net.activation_signature();
        return v;
    };
    std::uint64_t base = 0;
    {
        Rng rng(dropout_seed);
        const auto p = net.forward(x, Mode::Train, rng);
        base = net.activation_signature();
        net.backward(softmax_backward(r, p));
    }
    double worst = 0.0;
    int checked = 0, reduced = 0;
    Rng pick(16);
    for (auto& a : net.arrays()) {
        if (!a.trainable) continue;
        const std::vector<double> grad(a.tensor->grad().begin(), a.tensor->grad().end());
        int accepted = 0;
        for (int attempt = 0; attempt < 8 && accepted < 2; ++attempt) {
            const std::size_t i = pick.below(a.tensor->size());
            double& v = (*a.tensor)[i];
            const double saved = v;
            for (double eps : {1e-5, 1e-6}) {
                std::uint64_t sig_up = 0, sig_down = 0;
                v = saved + eps;
                const double up = eval(sig_up);
                v = saved - eps;
                const double down = eval(sig_down);
                v = saved;
                if (sig_up != base || sig_down != base) continue;
                worst = std::max(worst, testing::rel_error(grad[i], (up - down) / (2 * eps)));
                reduced += eps < 1e-5;
                ++accepted;
                ++checked;
                break;
            }
        }
        INFO(a.name);
        CHECK(accepted == 2);
    }
    MESSAGE("checked ", checked, " entries (", reduced, " with eps 1e-6), worst relative error ", worst);
    CHECK(worst < 1e-4);
}
