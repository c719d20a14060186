#include "plaqnet/model.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <sstream>

#include "plaqnet/kernels/kernels.hpp"

namespace plaqnet {

ArchitectureSpec ArchitectureSpec::plaquenet() {
    ArchitectureSpec spec;
    const std::size_t plan[] = {32, 32, 32, 64, 64, 64, 128, 128, 128};
    std::size_t channels = spec.input_channels;
    for (std::size_t b = 0; b < 9; ++b) {
        spec.layers.push_back({LayerKind::ConvBlock, channels, plan[b], 3, 0.0});
        channels = plan[b];
        if (b == 2 || b == 5) spec.layers.push_back({LayerKind::MaxPool, channels, channels, 2, 0.0});
    }
    spec.layers.push_back({LayerKind::GlobalAvgPool, channels, channels, 0, 0.0});
    spec.layers.push_back({LayerKind::Dense, channels, 512, 0, 0.0});
    spec.layers.push_back({LayerKind::Dropout, 512, 512, 0, 0.5});
    spec.layers.push_back({LayerKind::Dense, 512, kNumClasses, 0, 0.0});
    spec.layers.push_back({LayerKind::Softmax, kNumClasses, kNumClasses, 0, 0.0});
    return spec;
}

void ArchitectureSpec::validate() const {
    const ArchitectureSpec expected = plaquenet();
    if (input_channels != expected.input_channels || patch_size != expected.patch_size) {
        fail(ErrorKind::Architecture, "input must be 1 x 51 x 51");
    }
    if (layers.size() != expected.layers.size()) {
        fail(ErrorKind::Architecture, "expected " + std::to_string(expected.layers.size()) + " layers, got " +
                                          std::to_string(layers.size()));
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (!(layers[i] == expected.layers[i])) {
            fail(ErrorKind::Architecture, "layer " + std::to_string(i) + " deviates from the fixed plan");
        }
    }
}

namespace {

const char* kind_name(LayerKind kind) {
    switch (kind) {
        case LayerKind::ConvBlock: return "conv_block";
        case LayerKind::MaxPool: return "maxpool";
        case LayerKind::GlobalAvgPool: return "global_avg_pool";
        case LayerKind::Dense: return "dense";
        case LayerKind::Dropout: return "dropout";
        case LayerKind::Softmax: return "softmax";
    }
    return "?";
}

}  // namespace

std::string ArchitectureSpec::canonical() const {
    std::ostringstream os;
    os << "input " << input_channels << 'x' << patch_size << 'x' << patch_size << '\n';
    for (const auto& l : layers) {
        os << kind_name(l.kind) << ' ' << l.in << "->" << l.out;
        if (l.kind == LayerKind::ConvBlock) os << " k" << l.kernel << " same bn relu";
        if (l.kind == LayerKind::MaxPool) os << " 2x2/2 floor";
        if (l.kind == LayerKind::Dropout) {
            char buf[32];
            std::snprintf(buf, sizeof buf, " p=%.6g", l.ratio);
            os << buf;
        }
        os << '\n';
    }
    return os.str();
}

std::uint64_t ArchitectureSpec::fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : canonical()) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::size_t ArchitectureSpec::trainable_param_count() const {
    std::size_t total = 0;
    for (const auto& l : layers) {
        if (l.kind == LayerKind::ConvBlock) total += l.out * l.in * l.kernel * l.kernel + l.out + 2 * l.out;
        if (l.kind == LayerKind::Dense) total += l.in * l.out + l.out;
    }
    return total;
}

template <typename T>
PlaqueNet<T>::PlaqueNet(const ArchitectureSpec& spec) : spec_(spec) {
    spec_.validate();
    std::size_t dense_seen = 0;
    for (const auto& l : spec_.layers) {
        switch (l.kind) {
            case LayerKind::ConvBlock:
                blocks_.push_back({ConvParams<T>{Tensor<T>({l.out, l.in, l.kernel, l.kernel}), Tensor<T>({l.out})},
                                   BatchNormParams<T>::identity(l.out)});
                break;
            case LayerKind::MaxPool:
                pool_after_.push_back(blocks_.size() - 1);
                break;
            case LayerKind::Dense: {
                DenseParams<T> p{Tensor<T>({l.out, l.in}), Tensor<T>({l.out})};
                (dense_seen++ == 0 ? fc1_ : fc2_) = std::move(p);
                break;
            }
            case LayerKind::Dropout:
                dropout_ratio_ = l.ratio;
                break;
            default:
                break;
        }
    }
}

template <typename T>
void PlaqueNet<T>::initialize(std::uint64_t seed) {
    std::uint64_t stream = 0;
    auto he_normal = [&](Tensor<T>& w, std::size_t fan_in) {
        Rng rng(Rng::derive(seed, stream++));
        const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
        for (auto& v : w.values()) v = static_cast<T>(rng.normal(0.0, sd));
    };
    for (auto& b : blocks_) {
        he_normal(b.conv.weight, b.conv.in_channels() * b.conv.kernel() * b.conv.kernel());
        b.conv.bias.fill(T{0});
        b.bn = BatchNormParams<T>::identity(b.conv.out_channels());
    }
    he_normal(fc1_.weight, fc1_.weight.dim(1));
    fc1_.bias.fill(T{0});
    he_normal(fc2_.weight, fc2_.weight.dim(1));
    fc2_.bias.fill(T{0});
    clear_activations();
}

template <typename T>
void PlaqueNet<T>::clear_activations() {
    has_context_ = false;
    block_states_.clear();
    pool_caches_.clear();
    fc1_input_ = Tensor<T>();
    fc2_input_ = Tensor<T>();
    dropout_cache_ = DropoutCache();
}

template <typename T>
Tensor<T> PlaqueNet<T>::forward(const Tensor<T>& input, Mode mode, Rng& rng, ShapeTrace* trace) {
    require_rank(input, 4, "network input");
    if (input.dim(1) != spec_.input_channels) {
        fail(ErrorKind::Shape, "network expects single-channel input, got " + shape_string(input.shape()));
    }
    const bool train = mode == Mode::Train;
    if (train) {
        clear_activations();
        block_states_.resize(blocks_.size());
        pool_caches_.resize(pool_after_.size());
    }
    if (trace) {
        trace->clear();
        trace->emplace_back("input", input.shape());
    }

    Tensor<T> x = input;
    x.drop_grad();
    std::size_t pool_index = 0;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
        auto& block = blocks_[b];
        Tensor<T> pre = conv2d_forward(x, block.conv);
        Tensor<T> y;
        if (train) {
            auto& state = block_states_[b];
            y = Tensor<T>(pre.shape());
            batchnorm_forward_into(pre, y, block.bn, mode, bn_config_, &state.bn);
            kernels::relu_forward(y.values());
            state.input = std::move(x);
            state.pre_bn = std::move(pre);
        } else {
            batchnorm_forward_into(pre, pre, block.bn, mode, bn_config_, nullptr);
            kernels::relu_forward(pre.values());
            y = std::move(pre);
        }
        if (trace) trace->emplace_back("block" + std::to_string(b + 1), y.shape());
        const bool pooled = pool_index < pool_after_.size() && pool_after_[pool_index] == b;
        if (pooled) {
            Tensor<T> p = maxpool2x2_forward(y, train ? &pool_caches_[pool_index] : nullptr);
            if (train) block_states_[b].output = std::move(y);
            x = std::move(p);
            ++pool_index;
            if (trace) trace->emplace_back("pool" + std::to_string(pool_index), x.shape());
        } else if (train && b + 1 == blocks_.size()) {
            block_states_[b].output = y;
            x = std::move(y);
        } else {
            x = std::move(y);
        }
    }

    if (train) gap_input_shape_ = x.shape();
    Tensor<T> pooled = global_avg_pool_forward(x);
    if (trace) trace->emplace_back("global_pool", pooled.shape());
    Tensor<T> h = dense_forward(pooled, fc1_);
    if (trace) trace->emplace_back("fc1", h.shape());
    Tensor<T> dropped = dropout_forward(h, dropout_ratio_, mode, rng, train ? &dropout_cache_ : nullptr);
    logits_ = dense_forward(dropped, fc2_);
    if (trace) trace->emplace_back("fc2", logits_.shape());
    if (train) {
        fc1_input_ = std::move(pooled);
        fc2_input_ = std::move(dropped);
        has_context_ = true;
    }
    Tensor<T> probs = softmax(logits_);
    if (trace) trace->emplace_back("softmax", probs.shape());
    return probs;
}

template <typename T>
Tensor<T> PlaqueNet<T>::predict(const Tensor<T>& input) {
    Rng unused(0);
    return forward(input, Mode::Inference, unused);
}

template <typename T>
void PlaqueNet<T>::backward(const Tensor<T>& logits_grad) {
    if (!has_context_) fail(ErrorKind::Usage, "backward requires a preceding train-mode forward pass");
    if (logits_grad.shape() != logits_.shape()) {
        fail(ErrorKind::Shape, "logit gradient " + shape_string(logits_grad.shape()) + " does not match logits " +
                                   shape_string(logits_.shape()));
    }
    auto g2 = dense_backward(logits_grad, fc2_input_, fc2_);
    Tensor<T> d = dropout_backward(g2.input_grad, dropout_cache_);
    auto g1 = dense_backward(d, fc1_input_, fc1_);
    d = global_avg_pool_backward(g1.input_grad, gap_input_shape_);

    std::size_t pool_index = pool_after_.size();
    for (std::size_t b = blocks_.size(); b-- > 0;) {
        auto& block = blocks_[b];
        auto& state = block_states_[b];
        const Tensor<T>& relu_out = state.output.empty() ? block_states_[b + 1].input : state.output;
        d = relu_backward(d, relu_out);
        d = batchnorm_backward(d, state.pre_bn, block.bn, state.bn);
        auto cg = conv2d_backward(d, state.input, block.conv, b > 0);
        d = std::move(cg.input_grad);
        if (pool_index > 0 && b > 0 && pool_after_[pool_index - 1] == b - 1) {
            --pool_index;
            d = maxpool2x2_backward(d, pool_caches_[pool_index]);
        }
    }
}

template <typename T>
std::uint64_t PlaqueNet<T>::activation_signature() const {
    if (!has_context_) fail(ErrorKind::Usage, "activation_signature requires a train-mode forward pass");
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](std::uint64_t v) {
        h ^= v;
        h *= 0x100000001b3ULL;
    };
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
        const auto& state = block_states_[b];
        const Tensor<T>& out = state.output.empty() ? block_states_[b + 1].input : state.output;
        std::uint64_t word = 0;
        for (std::size_t i = 0; i < out.size(); ++i) {
            word = (word << 1) | (out[i] > T{0} ? 1u : 0u);
            if (i % 64 == 63) mix(word);
        }
        mix(word);
    }
    for (const auto& cache : pool_caches_) {
        for (auto idx : cache.argmax) mix(idx);
    }
    return h;
}

template <typename T>
void PlaqueNet<T>::zero_grad() {
    for (auto& a : arrays()) {
        if (a.trainable) a.tensor->zero_grad();
    }
}

template <typename T>
std::vector<NamedArray<T>> PlaqueNet<T>::arrays() {
    std::vector<NamedArray<T>> out;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
        const std::string prefix = "block" + std::to_string(b + 1) + ".";
        auto& blk = blocks_[b];
        out.push_back({prefix + "conv.weight", &blk.conv.weight, true});
        out.push_back({prefix + "conv.bias", &blk.conv.bias, true});
        out.push_back({prefix + "bn.gamma", &blk.bn.gamma, true});
        out.push_back({prefix + "bn.beta", &blk.bn.beta, true});
        out.push_back({prefix + "bn.running_mean", &blk.bn.running_mean, false});
        out.push_back({prefix + "bn.running_var", &blk.bn.running_var, false});
    }
    out.push_back({"fc1.weight", &fc1_.weight, true});
    out.push_back({"fc1.bias", &fc1_.bias, true});
    out.push_back({"fc2.weight", &fc2_.weight, true});
    out.push_back({"fc2.bias", &fc2_.bias, true});
    return out;
}

template <typename T>
std::vector<ConstNamedArray<T>> PlaqueNet<T>::arrays() const {
    std::vector<ConstNamedArray<T>> out;
    for (auto& a : const_cast<PlaqueNet*>(this)->arrays()) out.push_back({a.name, a.tensor, a.trainable});
    return out;
}

template <typename T>
template <typename U>
PlaqueNet<U> PlaqueNet<T>::cast() const {
    PlaqueNet<U> out(spec_);
    auto src = arrays();
    auto dst = out.arrays();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i].tensor = src[i].tensor->template cast<U>();
    return out;
}

template <typename T>
PlaqueNet<T> build_plaquenet(std::uint64_t seed) {
    PlaqueNet<T> net;
    net.initialize(seed);
    return net;
}

template <typename T>
std::size_t count_trainable_params(const PlaqueNet<T>& net) {
    std::size_t total = 0;
    for (const auto& a : net.arrays()) {
        if (a.trainable) total += a.tensor->size();
    }
    return total;
}

template class PlaqueNet<float>;
template class PlaqueNet<double>;
template PlaqueNet<double> PlaqueNet<float>::cast<double>() const;
template PlaqueNet<float> PlaqueNet<double>::cast<float>() const;
template PlaqueNet<float> build_plaquenet<float>(std::uint64_t);
template PlaqueNet<double> build_plaquenet<double>(std::uint64_t);
template std::size_t count_trainable_params(const PlaqueNet<float>&);
template std::size_t count_trainable_params(const PlaqueNet<double>&);

// Checkpoint layout (all integers little-endian):
//   "PLQNCKPT" | u32 version | u64 fingerprint
//   u64 iteration | f64 best_val_accuracy | u64 seed | u32 array_count
//   per array: u32 name_len | name | u8 kind (0 trainable, 1 statistic)
//              u32 rank | u64 dims[rank] | f32 values[product(dims)]

namespace {

constexpr char kMagic[8] = {'P', 'L', 'Q', 'N', 'C', 'K', 'P', 'T'};

class Writer {
public:
    explicit Writer(std::vector<std::uint8_t>& out) : out_(out) {}

    template <typename U>
    void uint(U v) {
        for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        out_.insert(out_.end(), b, b + n);
    }

private:
    std::vector<std::uint8_t>& out_;
};

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}

    template <typename U>
    U uint(const char* what) {
        need(sizeof(U), what);
        U v = 0;
        for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<U>(in_[pos_ + i]) << (8 * i));
        pos_ += sizeof(U);
        return v;
    }
    std::string string(std::size_t n, const char* what) {
        need(n, what);
        std::string s(in_.begin() + static_cast<std::ptrdiff_t>(pos_),
                      in_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == in_.size(); }

private:
    void need(std::size_t n, const char* what) {
        if (in_.size() - pos_ < n) {
            fail(ErrorKind::CorruptCheckpoint, std::string("checkpoint truncated while reading ") + what);
        }
    }

    const std::vector<std::uint8_t>& in_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const PlaqueNet<float>& net, const CheckpointMeta& meta) {
    std::vector<std::uint8_t> out;
    Writer w(out);
    w.bytes(kMagic, sizeof kMagic);
    w.uint(kCheckpointVersion);
    w.uint(net.spec().fingerprint());
    w.uint(meta.iteration);
    w.uint(std::bit_cast<std::uint64_t>(meta.best_val_accuracy));
    w.uint(meta.seed);
    const auto arrays = net.arrays();
    w.uint(static_cast<std::uint32_t>(arrays.size()));
    for (const auto& a : arrays) {
        w.uint(static_cast<std::uint32_t>(a.name.size()));
        w.bytes(a.name.data(), a.name.size());
        w.uint(static_cast<std::uint8_t>(a.trainable ? 0 : 1));
        w.uint(static_cast<std::uint32_t>(a.tensor->rank()));
        for (std::size_t d : a.tensor->shape()) w.uint(static_cast<std::uint64_t>(d));
        for (float v : a.tensor->values()) w.uint(std::bit_cast<std::uint32_t>(v));
    }
    return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    Reader r(bytes);
    if (r.string(sizeof kMagic, "magic") != std::string(kMagic, sizeof kMagic)) {
        fail(ErrorKind::CorruptCheckpoint, "not a checkpoint file (bad magic)");
    }
    const auto version = r.uint<std::uint32_t>("version");
    if (version != kCheckpointVersion) {
        fail(ErrorKind::VersionMismatch, "checkpoint version " + std::to_string(version) + ", expected " +
                                             std::to_string(kCheckpointVersion));
    }
    Checkpoint ck{PlaqueNet<float>(), {}};
    const auto fingerprint = r.uint<std::uint64_t>("fingerprint");
    if (fingerprint != ck.net.spec().fingerprint()) {
        fail(ErrorKind::FingerprintMismatch, "checkpoint was written for a different architecture");
    }
    ck.meta.iteration = r.uint<std::uint64_t>("iteration");
    ck.meta.best_val_accuracy = std::bit_cast<double>(r.uint<std::uint64_t>("best accuracy"));
    ck.meta.seed = r.uint<std::uint64_t>("seed");
    auto arrays = ck.net.arrays();
    const auto count = r.uint<std::uint32_t>("array count");
    if (count != arrays.size()) {
        fail(ErrorKind::CorruptCheckpoint, "checkpoint holds " + std::to_string(count) + " arrays, expected " +
                                               std::to_string(arrays.size()));
    }
    for (auto& a : arrays) {
        const auto name_len = r.uint<std::uint32_t>("name length");
        const std::string name = r.string(name_len, "name");
        if (name != a.name) fail(ErrorKind::CorruptCheckpoint, "expected array " + a.name + ", found " + name);
        const auto kind = r.uint<std::uint8_t>("kind");
        if (kind != (a.trainable ? 0 : 1)) fail(ErrorKind::CorruptCheckpoint, "array " + name + " has the wrong kind");
        const auto rank = r.uint<std::uint32_t>("rank");
        Shape shape;
        for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(static_cast<std::size_t>(r.uint<std::uint64_t>("dim")));
        if (shape != a.tensor->shape()) {
            fail(ErrorKind::CorruptCheckpoint, "array " + name + " has shape " + shape_string(shape) + ", expected " +
                                                   shape_string(a.tensor->shape()));
        }
        for (auto& v : a.tensor->values()) v = std::bit_cast<float>(r.uint<std::uint32_t>("values"));
    }
    if (!r.done()) fail(ErrorKind::CorruptCheckpoint, "trailing bytes after the last array");
    return ck;
}

void save_checkpoint(const PlaqueNet<float>& net, const CheckpointMeta& meta, const std::filesystem::path& path) {
    const auto bytes = encode_checkpoint(net, meta);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot write checkpoint " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::Io, "failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Io, "cannot read checkpoint " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

}  // namespace plaqnet
