#include <doctest.h>

#include <cmath>
#include <fstream>
#include <limits>

#include "plaqnet/phantom.hpp"
#include "plaqnet/preprocess.hpp"
#include "plaqnet/train.hpp"
#include "support.hpp"

using namespace plaqnet;

namespace {

LabeledImage phantom_image(std::uint64_t seed, const std::string& id) {
    PhantomSpec spec;
    const auto p = generate_phantom(spec, seed);
    return make_labeled_image(id, preprocess_frame(p.image, &p.labels));
}

template <typename F>
ErrorKind kind_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    FAIL("expected an error");
    return ErrorKind::Usage;
}

TrainConfig tiny_config() {
    TrainConfig c;
    c.batch_size = 4;
    c.max_iterations = 6;
    c.validation_period = 3;
    c.augmentation_period = 2;
    c.validation_per_image = 8;
    c.seed = 21;
    return c;
}

}  // namespace

TEST_CASE("perfect predictions have zero loss") {
    Tensor<double> probs({3, 5});
    const std::vector<std::uint8_t> labels{0, 3, 4};
    for (std::size_t i = 0; i < 3; ++i) probs[i * 5 + labels[i]] = 1.0;
    const std::vector<double> w{0.7, 2.0, 0.1};
    CHECK(weighted_cross_entropy(probs, std::span<const std::uint8_t>(labels), w) == 0.0);
}

TEST_CASE("uniform predictions with balanced weights give 0.2 ln 5") {
    for (std::size_t n : {1, 7, 216}) {
        Tensor<double> probs({n, 5}, 0.2);
        std::vector<std::uint8_t> labels(n);
        for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<std::uint8_t>(i % 5);
        const std::vector<double> w(n, 0.2);
        const double loss = weighted_cross_entropy(probs, std::span<const std::uint8_t>(labels), w);
        CHECK(std::abs(loss - 0.2 * std::log(5.0)) < 1e-9);
        CHECK(std::abs(loss - 0.321888) < 1e-6);
    }
}

TEST_CASE("one-hot and index forms agree, and the log is floored") {
    Tensor<double> probs({2, 5});
    probs[0] = 1.0;
    probs[5 + 1] = 1.0;
    const std::vector<std::uint8_t> labels{0, 2};
    const std::vector<double> w{1.0, 1.0};
    const double a = weighted_cross_entropy(probs, std::span<const std::uint8_t>(labels), w);
    const double b = weighted_cross_entropy(probs, one_hot<double>(labels), w);
    CHECK(a == b);
    CHECK(std::abs(a - (-std::log(1e-12) / 2.0)) < 1e-9);
}

TEST_CASE("loss input errors") {
    Tensor<double> probs({2, 5}, 0.2);
    const std::vector<std::uint8_t> labels{0, 1};
    const std::vector<double> w{1.0, 1.0};
    const std::vector<double> w3{1.0, 1.0, 1.0};
    CHECK(kind_of([&] { weighted_cross_entropy(probs, std::span<const std::uint8_t>(labels), w3); }) ==
          ErrorKind::Shape);
    probs[0] = 0.5;
    CHECK(kind_of([&] { weighted_cross_entropy(probs, std::span<const std::uint8_t>(labels), w); }) ==
          ErrorKind::Numeric);
}

TEST_CASE("logit gradient matches finite differences") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 1 + rng.below(6);
        auto logits = testing::random_tensor({n, 5}, rng, -3, 3);
        std::vector<std::uint8_t> labels(n);
        std::vector<double> w(n);
        for (std::size_t i = 0; i < n; ++i) {
            labels[i] = static_cast<std::uint8_t>(rng.below(5));
            w[i] = rng.uniform(0.05, 1.0);
        }
        const auto loss = [&] {
            return weighted_cross_entropy(softmax(logits), std::span<const std::uint8_t>(labels), w);
        };
        const auto grad = weighted_cross_entropy_logit_grad(softmax(logits), std::span<const std::uint8_t>(labels), w);
        CHECK(testing::max_fd_error(logits, grad.values(), loss) < 1e-6);
    }
}

TEST_CASE("standard momentum one step") {
    std::vector<double> theta{1.0}, g{1.0}, v{0.0};
    optimizer_step<double>(theta, g, v, 1e-4, 0.9, OptimizerMode::Standard);
    CHECK(v[0] == -0.0001);
    CHECK(theta[0] == 0.9999);
}

TEST_CASE("literal update one step") {
    std::vector<double> theta{1.0}, g{1.0}, v{};
    optimizer_step<double>(theta, g, v, 1e-4, 0.9, OptimizerMode::PaperLiteral);
    // 0.9 * 1 + (1 - 0.9) * (-0.0001) evaluated in IEEE double; the decimal
    // 0.89999 itself is one ulp below.
    CHECK(theta[0] == 0.9 * 1.0 + (1.0 - 0.9) * -(1e-4 * 1.0));
    CHECK(std::nextafter(theta[0], 0.0) == 0.89999);
    CHECK(std::abs(theta[0] - 0.89999) < 1e-15);
}

TEST_CASE("zero gradient leaves standard-mode parameters unchanged") {
    std::vector<double> theta{1.5, -2.0}, g{0.0, 0.0}, v{0.0, 0.0};
    optimizer_step<double>(theta, g, v, 1e-4, 0.9, OptimizerMode::Standard);
    CHECK(theta == std::vector<double>{1.5, -2.0});
}

TEST_CASE("class contributions stay balanced when a class is duplicated") {
    // Expected loss share of class j is M_j w_j / sum_k M_k w_k.
    const ClassCounts base{50, 200, 80, 400, 30};
    ClassCounts dup = base;
    dup[1] *= 2;
    for (const auto& counts : {base, dup}) {
        const auto w = class_weights(counts);
        double total = 0;
        for (std::size_t j = 0; j < 5; ++j) total += static_cast<double>(counts[j]) * w[j];
        for (std::size_t j = 0; j < 5; ++j) CHECK(std::abs(static_cast<double>(counts[j]) * w[j] / total - 0.2) < 1e-12);
    }
}

TEST_CASE("config validation and key-value round trip") {
    TrainConfig c;
    CHECK_NOTHROW(c.validate());
    c.learning_rate = 0;
    CHECK(kind_of([&] { c.validate(); }) == ErrorKind::Config);
    c = {};
    c.momentum = 1.5;
    CHECK(kind_of([&] { c.validate(); }) == ErrorKind::Config);
    c = {};
    c.batch_size = 0;
    CHECK(kind_of([&] { c.validate(); }) == ErrorKind::Config);

    TrainConfig d;
    d.optimizer = OptimizerMode::PaperLiteral;
    d.max_iterations = 77;
    d.learning_rate = 3e-5;
    const auto back = TrainConfig::from_key_values(d.to_key_values());
    CHECK(back.to_key_values() == d.to_key_values());
    CHECK(kind_of([] { TrainConfig::from_key_values({{"lr", "1"}}); }) == ErrorKind::Config);
    CHECK(kind_of([] { TrainConfig::from_key_values({{"optimizer", "adam"}}); }) == ErrorKind::Config);
    CHECK(TrainConfig().max_iterations == 20000);
    CHECK(TrainConfig().batch_size == 216);
}

TEST_CASE("repeated steps on a fixed batch decrease the loss") {
    const auto img = phantom_image(1, "a");
    const std::vector<LabeledImage> imgs{img};
    PatchSampler sampler(imgs, {0.2, 0.2, 0.2, 0.2, 0.2});
    int monotone = 0;
    const int trials = 20;
    for (int trial = 0; trial < trials; ++trial) {
        Rng rng(100 + trial);
        const auto batch = sampler.sample(2, rng);
        std::vector<std::uint8_t> labels{batch[0].label, batch[1].label};
        std::vector<double> w{0.2, 0.2};
        const auto input = stack_patches(batch);
        PlaqueNet<float> net;
        net.initialize(500 + trial);
        TrainConfig cfg;
        cfg.learning_rate = 1e-4;
        Optimizer<float> opt(net, cfg);
        double prev = std::numeric_limits<double>::infinity();
        bool ok = true;
        for (int step = 0; step <= 50; ++step) {
            Rng dropout(7);  // same mask every pass
            const auto probs = net.forward(input, Mode::Train, dropout);
            const double loss = weighted_cross_entropy(probs, std::span<const std::uint8_t>(labels), w);
            if (!(loss < prev)) ok = false;
            prev = loss;
            if (step == 50) break;
            net.zero_grad();
            net.backward(weighted_cross_entropy_logit_grad(probs, std::span<const std::uint8_t>(labels), w));
            opt.step(net);
        }
        monotone += ok;
    }
    CHECK(monotone >= 19);
}

TEST_CASE("first-batch loss of an untrained network is near ln 5 times the mean weight") {
    std::vector<LabeledImage> imgs{phantom_image(2, "a"), phantom_image(3, "b")};
    const auto w = class_weights(count_classes(imgs));
    PatchSampler sampler(imgs, w);
    Rng rng(5);
    const auto batch = sampler.sample(32, rng);
    std::vector<std::uint8_t> labels;
    std::vector<double> weights;
    double mean_w = 0;
    for (const auto& s : batch) {
        labels.push_back(s.label);
        weights.push_back(s.weight);
        mean_w += s.weight / static_cast<double>(batch.size());
    }
    PlaqueNet<float> net;
    net.initialize(9);
    Rng dropout(1);
    const auto probs = net.forward(stack_patches(batch), Mode::Train, dropout);
    const double loss = weighted_cross_entropy(probs, std::span<const std::uint8_t>(labels), weights);
    const double ref = std::log(5.0) * mean_w;
    CHECK(loss > ref / 2);
    CHECK(loss < ref * 2);
}

TEST_CASE("training is reproducible and keeps the best validation checkpoint") {
    TrainData data{{phantom_image(4, "a"), phantom_image(5, "b")}, {phantom_image(6, "c")}};
    const auto cfg = tiny_config();
    std::vector<TrainLogRow> streamed;
    const auto r1 = train(data, cfg, [&](const TrainLogRow& r) { streamed.push_back(r); });
    const auto r2 = train(data, cfg);
    REQUIRE(r1.log.size() == 6);
    CHECK(r1.log == r2.log);
    CHECK(streamed == r1.log);
    CHECK(encode_checkpoint(r1.best.net, r1.best.meta) == encode_checkpoint(r2.best.net, r2.best.meta));

    double best = -1;
    for (const auto& row : r1.log) {
        CHECK(std::isfinite(row.loss));
        CHECK(row.val_accuracy.has_value() == (row.iteration % 3 == 0));
        if (row.val_accuracy) best = std::max(best, *row.val_accuracy);
    }
    CHECK(r1.best.meta.best_val_accuracy == best);
    CHECK(r1.best.meta.seed == cfg.seed);

    auto other = cfg;
    other.seed = 22;
    CHECK_FALSE(train(data, other).log == r1.log);
}

TEST_CASE("missing classes, empty folds and divergence are distinct errors") {
    const auto img = phantom_image(7, "a");
    TrainData no_ca{{img}, {img}};
    for (auto& v : no_ca.train[0].labels.data) {
        if (v == 4) v = 2;
    }
    CHECK(kind_of([&] { train(no_ca, tiny_config()); }) == ErrorKind::MissingClass);
    CHECK(kind_of([&] { train(TrainData{{img}, {}}, tiny_config()); }) == ErrorKind::Usage);

    auto cfg = tiny_config();
    cfg.learning_rate = 1e30;
    CHECK(kind_of([&] { train(TrainData{{img}, {img}}, cfg); }) == ErrorKind::Divergence);
}

TEST_CASE("training log CSV layout") {
    const auto dir = testing::scratch_dir("trainlog");
    const std::vector<TrainLogRow> log{{1, 0.5, std::nullopt}, {2, 0.25, 0.75}};
    write_train_log(log, dir / "log.csv");
    std::ifstream in(dir / "log.csv");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    CHECK(text == "iteration,loss,val_accuracy\n1,0.5,\n2,0.25,0.75\n");
}
