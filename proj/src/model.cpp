#include "parsgd/model.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace parsgd {

std::vector<std::vector<std::size_t>> layer_output_shapes(const ArchitectureSpec& arch) {
    detail::require(!arch.layers.empty(), "architecture has no layers");
    detail::require(arch.layers.back().kind == Layer::Kind::softmax_output,
                    "last layer must be the softmax output");
    for (std::size_t i = 0; i + 1 < arch.layers.size(); ++i)
        detail::require(arch.layers[i].kind != Layer::Kind::softmax_output,
                        "softmax output must be the last layer");

    std::vector<std::vector<std::size_t>> shapes;
    std::vector<std::size_t> cur = arch.input_shape;
    for (const Layer& layer : arch.layers) {
        switch (layer.kind) {
            case Layer::Kind::dense:
            case Layer::Kind::softmax_output:
                detail::require(cur.size() == 1, "dense layer needs flat input, got " +
                                                     shape_to_string(cur));
                cur = {layer.units};
                break;
            case Layer::Kind::conv5x5:
                detail::require(cur.size() == 3, "conv layer needs h x w x c input, got " +
                                                     shape_to_string(cur));
                cur = {cur[0], cur[1], layer.units};
                break;
            case Layer::Kind::maxpool2x2:
                detail::require(cur.size() == 3, "maxpool needs h x w x c input, got " +
                                                     shape_to_string(cur));
                cur = {(cur[0] + 1) / 2, (cur[1] + 1) / 2, cur[2]};
                break;
            case Layer::Kind::flatten: {
                std::size_t n = 1;
                for (std::size_t d : cur) n *= d;
                cur = {n};
                break;
            }
        }
        shapes.push_back(cur);
    }
    return shapes;
}

namespace {

ArchitectureSpec dense_stack(std::string name, std::vector<std::size_t> widths,
                             Activation hidden_act) {
    ArchitectureSpec arch;
    arch.name = std::move(name);
    arch.input_shape = {widths.front()};
    for (std::size_t i = 1; i + 1 < widths.size(); ++i)
        arch.layers.push_back(Layer::dense(widths[i], hidden_act));
    arch.layers.push_back(Layer::softmax_output(widths.back()));
    return arch;
}

ArchitectureSpec conv_stack(std::string name, std::size_t h, std::size_t w, std::size_t c,
                            std::size_t classes) {
    ArchitectureSpec arch;
    arch.name = std::move(name);
    arch.input_shape = {h, w, c};
    arch.layers = {Layer::conv5x5(32), Layer::maxpool2x2(), Layer::conv5x5(64),
                   Layer::maxpool2x2(), Layer::flatten(),
                   Layer::dense(1024, Activation::sigmoid), Layer::softmax_output(classes)};
    return arch;
}

}  // namespace

ArchitectureSpec build_architecture(const std::string& name, Activation hidden_activation) {
    if (name == "adult-dnn") return dense_stack(name, {123, 200, 100, 2}, hidden_activation);
    if (name == "acoustic-dnn") return dense_stack(name, {50, 200, 100, 3}, hidden_activation);
    if (name == "mnist-dnn") return dense_stack(name, {784, 200, 100, 10}, hidden_activation);
    if (name == "cifar10-dnn") return dense_stack(name, {3072, 200, 100, 10}, hidden_activation);
    if (name == "higgs-dnn") return dense_stack(name, {28, 1024, 2}, hidden_activation);
    if (name == "mnist-cnn") return conv_stack(name, 28, 28, 1, 10);
    if (name == "cifar10-cnn") return conv_stack(name, 32, 32, 3, 10);
    throw std::invalid_argument("unknown architecture: " + name);
}

std::vector<std::string> known_architectures() {
    return {"adult-dnn", "acoustic-dnn", "mnist-dnn",  "mnist-cnn",
            "cifar10-dnn", "cifar10-cnn", "higgs-dnn"};
}

namespace {

void put_u64_le(std::ostream& os, std::uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(buf), 8);
}

void put_u32_le(std::ostream& os, std::uint32_t v) {
    unsigned char buf[4];
    for (int i = 0; i < 4; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(buf), 4);
}

std::uint64_t get_u64_le(std::istream& is) {
    unsigned char buf[8];
    is.read(reinterpret_cast<char*>(buf), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return v;
}

std::uint32_t get_u32_le(std::istream& is) {
    unsigned char buf[4];
    is.read(reinterpret_cast<char*>(buf), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[i]) << (8 * i);
    return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::string& arch_tag,
                     const ParameterSet& params) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    const std::vector<double> flat = params.flatten();
    put_u64_le(os, flat.size());
    put_u32_le(os, static_cast<std::uint32_t>(arch_tag.size()));
    os.write(arch_tag.data(), static_cast<std::streamsize>(arch_tag.size()));
    for (double d : flat) {
        std::uint64_t bits;
        std::memcpy(&bits, &d, 8);
        put_u64_le(os, bits);
    }
    if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    Checkpoint ckpt;
    const std::uint64_t count = get_u64_le(is);
    const std::uint32_t taglen = get_u32_le(is);
    ckpt.arch_tag.resize(taglen);
    is.read(ckpt.arch_tag.data(), taglen);
    ckpt.flat.resize(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint64_t bits = get_u64_le(is);
        std::memcpy(&ckpt.flat[i], &bits, 8);
    }
    if (!is) throw std::runtime_error("truncated checkpoint: " + path);
    return ckpt;
}

}  // namespace parsgd
