#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedseg/model.hpp"

namespace fedseg {

struct UNetConfig {
    int levels = 3;
    int base_channels = 8;
    int in_channels = 1;
    int out_channels = 1;
    int attention_reduction = 8;

    void validate() const {
        if (levels < 2) throw ConfigError("UNetConfig: levels must be >= 2");
        if (base_channels < attention_reduction)
            throw ConfigError("UNetConfig: base_channels must be >= attention_reduction");
        if (in_channels < 1 || out_channels < 1)
            throw ConfigError("UNetConfig: channel counts must be positive");
    }

    // Input spatial dims must survive levels-1 poolings.
    bool accepts(int h, int w) const {
        const int div = 1 << (levels - 1);
        return h % div == 0 && w % div == 0 && h >= div && w >= div;
    }

    int channels_at(int level) const { return base_channels << level; }

    std::string canonical() const {
        return "levels=" + std::to_string(levels) + ";base=" + std::to_string(base_channels) +
               ";in=" + std::to_string(in_channels) + ";out=" + std::to_string(out_channels) +
               ";r=" + std::to_string(attention_reduction);
    }
};

// Soft attention on a skip connection: concat(skip, gate) -> 1x1 conv down
// to max(1, 2C/r) channels -> sigmoid -> 1x1 conv back to C -> sigmoid ->
// weights in (0,1), applied elementwise to the skip.
struct AttentionGate {
    Conv2dLayer reduce, restore;

    TensorPtr forward(const TensorPtr& skip, const TensorPtr& gate) const {
        if (skip->shape.h != gate->shape.h || skip->shape.w != gate->shape.w)
            throw DimensionError("attention_gate: spatial mismatch " + skip->shape.str() +
                                 " vs " + gate->shape.str());
        if (skip->shape.c != gate->shape.c)
            throw DimensionError("attention_gate: channel mismatch " + skip->shape.str() +
                                 " vs " + gate->shape.str());
        auto x = concat_channels(skip, gate);
        x = sigmoid(reduce.forward(x));
        auto weights = sigmoid(restore.forward(x));
        return elementwise_mul(skip, weights);
    }
};

// Encoder-decoder segmentation network with attention-gated skips. Blocks
// are [conv3x3 -> BN -> ReLU] x2; downsampling is 2x2 max pooling, the up
// path is nearest x2 + 1x1 channel alignment. Output head is a 1x1 conv +
// sigmoid, so every output pixel lies in (0,1).
class AttentionUNet : public Model {
  public:
    AttentionUNet(const UNetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(derive_seed(seed, 0xA77E, 0x0E7));

        int in_ch = cfg_.in_channels;
        for (int lvl = 0; lvl < cfg_.levels; ++lvl) {
            const int ch = cfg_.channels_at(lvl);
            enc_.push_back(make_block("enc" + std::to_string(lvl), rng, in_ch, ch));
            in_ch = ch;
        }
        for (int lvl = cfg_.levels - 2; lvl >= 0; --lvl) {
            const int ch = cfg_.channels_at(lvl);
            const int deep_ch = cfg_.channels_at(lvl + 1);
            Decoder d;
            const std::string prefix = "dec" + std::to_string(lvl);
            d.align = make_conv(prefix + ".align", rng, deep_ch, ch, 1, 0);
            const int reduced = std::max(1, 2 * ch / cfg_.attention_reduction);
            d.gate.reduce = make_conv(prefix + ".gate.reduce", rng, 2 * ch, reduced, 1, 0);
            d.gate.restore = make_conv(prefix + ".gate.restore", rng, reduced, ch, 1, 0);
            d.block = make_block(prefix, rng, 2 * ch, ch);
            dec_.push_back(std::move(d));
        }
        head_ = make_conv("head", rng, cfg_.base_channels, cfg_.out_channels, 1, 0);
    }

    TensorPtr forward(const TensorPtr& batch, bool train) {
        const Shape& s = batch->shape;
        if (s.c != cfg_.in_channels)
            throw DimensionError("forward: input channels " + std::to_string(s.c));
        if (!cfg_.accepts(s.h, s.w))
            throw DimensionError("forward: spatial dims " + s.str() + " not divisible by 2^" +
                                 std::to_string(cfg_.levels - 1));

        std::vector<TensorPtr> feats;
        TensorPtr x = batch;
        for (int lvl = 0; lvl < cfg_.levels; ++lvl) {
            if (lvl > 0) x = max_pool2d(x);
            x = run_block(enc_[lvl], x, train);
            feats.push_back(x);
        }
        for (std::size_t i = 0; i < dec_.size(); ++i) {
            const auto& d = dec_[i];
            const auto& skip = feats[cfg_.levels - 2 - static_cast<int>(i)];
            auto g = d.align.forward(upsample2x(x));
            auto gated = d.gate.forward(skip, g);
            x = run_block(d.block, concat_channels(gated, g), train);
        }
        return sigmoid(head_.forward(x));
    }

    const UNetConfig& config() const { return cfg_; }

    // Gate by skip level, for direct tests of the attention op.
    const AttentionGate& gate_at_level(int level) const {
        return dec_.at(static_cast<std::size_t>(cfg_.levels - 2 - level)).gate;
    }
    AttentionGate& gate_at_level(int level) {
        return dec_.at(static_cast<std::size_t>(cfg_.levels - 2 - level)).gate;
    }

  private:
    struct Block {
        Conv2dLayer conv1, conv2;
        BatchNorm2dLayer bn1, bn2;
    };
    struct Decoder {
        Conv2dLayer align;
        AttentionGate gate;
        Block block;
    };

    Conv2dLayer make_conv(const std::string& name, Rng& rng, int in_ch, int out_ch, int k,
                          int pad) {
        Conv2dLayer conv;
        conv.weight = he_uniform(rng, Shape{out_ch, in_ch, k, k});
        conv.bias = Tensor::create(Shape{1, out_ch, 1, 1});
        conv.padding = pad;
        register_parameter(name + ".weight", conv.weight);
        register_parameter(name + ".bias", conv.bias);
        return conv;
    }

    BatchNorm2dLayer make_bn(const std::string& name, int ch) {
        BatchNorm2dLayer bn;
        bn.gamma = Tensor::full(Shape{1, ch, 1, 1}, 1.0);
        bn.beta = Tensor::create(Shape{1, ch, 1, 1});
        bn.running_mean = Tensor::create(Shape{1, ch, 1, 1});
        bn.running_var = Tensor::full(Shape{1, ch, 1, 1}, 1.0);
        register_parameter(name + ".gamma", bn.gamma);
        register_parameter(name + ".beta", bn.beta);
        register_buffer(name + ".running_mean", bn.running_mean);
        register_buffer(name + ".running_var", bn.running_var);
        return bn;
    }

    Block make_block(const std::string& prefix, Rng& rng, int in_ch, int out_ch) {
        Block b;
        b.conv1 = make_conv(prefix + ".conv1", rng, in_ch, out_ch, 3, 1);
        b.bn1 = make_bn(prefix + ".bn1", out_ch);
        b.conv2 = make_conv(prefix + ".conv2", rng, out_ch, out_ch, 3, 1);
        b.bn2 = make_bn(prefix + ".bn2", out_ch);
        return b;
    }

    static TensorPtr run_block(const Block& b, const TensorPtr& x, bool train) {
        auto y = relu(b.bn1.forward(b.conv1.forward(x), train));
        return relu(b.bn2.forward(b.conv2.forward(y), train));
    }

    UNetConfig cfg_;
    std::vector<Block> enc_;
    std::vector<Decoder> dec_;
    Conv2dLayer head_;
};

}  // namespace fedseg
