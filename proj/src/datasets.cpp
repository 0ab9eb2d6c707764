#include "parsgd/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

namespace parsgd {

namespace {

std::uint32_t read_be_u32(std::istream& is, const std::string& path) {
    unsigned char buf[4];
    is.read(reinterpret_cast<char*>(buf), 4);
    if (!is) throw DataError("truncated file: " + path);
    return (static_cast<std::uint32_t>(buf[0]) << 24) |
           (static_cast<std::uint32_t>(buf[1]) << 16) |
           (static_cast<std::uint32_t>(buf[2]) << 8) | static_cast<std::uint32_t>(buf[3]);
}

std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open file: " + path);
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

Tensor one_hot(const std::vector<std::size_t>& classes, std::size_t class_count) {
    Tensor labels({classes.size(), class_count});
    for (std::size_t i = 0; i < classes.size(); ++i) labels.at2(i, classes[i]) = 1.0;
    return labels;
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw DataError("cannot open file: " + images_path);
    std::ifstream lab(labels_path, std::ios::binary);
    if (!lab) throw DataError("cannot open file: " + labels_path);

    const std::uint32_t img_magic = read_be_u32(img, images_path);
    if (img_magic != 0x00000803u) {
        std::ostringstream os;
        os << "bad IDX image magic 0x" << std::hex << img_magic << " in " << images_path;
        throw DataError(os.str());
    }
    const std::uint32_t lab_magic = read_be_u32(lab, labels_path);
    if (lab_magic != 0x00000801u) {
        std::ostringstream os;
        os << "bad IDX label magic 0x" << std::hex << lab_magic << " in " << labels_path;
        throw DataError(os.str());
    }

    const std::uint32_t img_count = read_be_u32(img, images_path);
    const std::uint32_t rows = read_be_u32(img, images_path);
    const std::uint32_t cols = read_be_u32(img, images_path);
    const std::uint32_t lab_count = read_be_u32(lab, labels_path);
    if (img_count != lab_count)
        throw DataError("IDX count mismatch: " + std::to_string(img_count) + " images vs " +
                        std::to_string(lab_count) + " labels");

    Dataset ds;
    ds.name = "idx";
    ds.class_count = 10;
    ds.norm.kind = Normalization::Kind::pixel_scale;
    ds.samples = Tensor({img_count, rows, cols, 1});
    std::vector<unsigned char> buf(static_cast<std::size_t>(rows) * cols);
    std::vector<std::size_t> classes(img_count);
    for (std::uint32_t i = 0; i < img_count; ++i) {
        img.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (!img) throw DataError("truncated file: " + images_path);
        for (std::size_t px = 0; px < buf.size(); ++px)
            ds.samples[static_cast<std::size_t>(i) * buf.size() + px] = buf[px] / 255.0;
        char c;
        lab.read(&c, 1);
        if (!lab) throw DataError("truncated file: " + labels_path);
        const auto label = static_cast<unsigned char>(c);
        if (label > 9) throw DataError("IDX label out of range: " + std::to_string(label));
        classes[i] = label;
    }
    ds.labels = one_hot(classes, ds.class_count);
    return ds;
}

Dataset load_cifar10_binary(const std::vector<std::string>& paths) {
    constexpr std::size_t kRecord = 3073;
    constexpr std::size_t kPlane = 1024;  // 32 * 32
    Dataset ds;
    ds.name = "cifar10";
    ds.class_count = 10;
    ds.norm.kind = Normalization::Kind::pixel_scale;

    std::size_t total = 0;
    std::vector<std::vector<unsigned char>> files;
    for (const std::string& path : paths) {
        files.push_back(read_file(path));
        if (files.back().size() % kRecord != 0)
            throw DataError("CIFAR-10 file size " + std::to_string(files.back().size()) +
                            " not divisible by 3073: " + path);
        total += files.back().size() / kRecord;
    }

    ds.samples = Tensor({total, 32, 32, 3});
    std::vector<std::size_t> classes(total);
    std::size_t sample = 0;
    for (const auto& bytes : files) {
        for (std::size_t rec = 0; rec < bytes.size(); rec += kRecord, ++sample) {
            const unsigned char label = bytes[rec];
            if (label > 9)
                throw DataError("CIFAR-10 label byte out of range: " + std::to_string(label));
            classes[sample] = label;
            const unsigned char* px = bytes.data() + rec + 1;
            for (std::size_t y = 0; y < 32; ++y)
                for (std::size_t x = 0; x < 32; ++x)
                    for (std::size_t c = 0; c < 3; ++c)
                        ds.samples.at4(sample, y, x, c) = px[c * kPlane + y * 32 + x] / 255.0;
        }
    }
    ds.labels = one_hot(classes, ds.class_count);
    return ds;
}

Dataset load_libsvm(const std::string& path, std::size_t feature_count,
                    std::size_t class_count) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open file: " + path);

    std::vector<double> raw_labels;
    std::vector<std::vector<std::pair<std::size_t, double>>> rows;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        double label;
        if (!(ls >> label))
            throw DataError("unparseable label at " + path + ":" + std::to_string(line_no));
        std::vector<std::pair<std::size_t, double>> row;
        std::string tok;
        while (ls >> tok) {
            const std::size_t colon = tok.find(':');
            if (colon == std::string::npos)
                throw DataError("unparseable feature '" + tok + "' at " + path + ":" +
                                std::to_string(line_no));
            std::size_t idx;
            double val;
            try {
                idx = std::stoull(tok.substr(0, colon));
                val = std::stod(tok.substr(colon + 1));
            } catch (const std::exception&) {
                throw DataError("unparseable feature '" + tok + "' at " + path + ":" +
                                std::to_string(line_no));
            }
            if (idx < 1 || idx > feature_count)
                throw DataError("feature index " + std::to_string(idx) +
                                " out of range [1, " + std::to_string(feature_count) +
                                "] at " + path + ":" + std::to_string(line_no));
            row.emplace_back(idx - 1, val);
        }
        raw_labels.push_back(label);
        rows.push_back(std::move(row));
    }

    // remap distinct raw labels to 0-based class indices in ascending order
    std::map<double, std::size_t> label_map;
    for (double l : raw_labels) label_map.emplace(l, 0);
    if (label_map.size() > class_count)
        throw DataError(path + " has " + std::to_string(label_map.size()) +
                        " distinct labels but class_count is " + std::to_string(class_count));
    std::size_t next = 0;
    for (auto& [raw, idx] : label_map) idx = next++;

    Dataset ds;
    ds.name = "libsvm";
    ds.class_count = class_count;
    ds.samples = Tensor({rows.size(), feature_count});
    std::vector<std::size_t> classes(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (const auto& [idx, val] : rows[i]) ds.samples.at2(i, idx) = val;
        classes[i] = label_map.at(raw_labels[i]);
    }
    ds.labels = one_hot(classes, class_count);
    return ds;
}

Dataset synthetic_blobs(std::size_t m, std::size_t features, std::size_t classes,
                        std::uint64_t seed, double separation) {
    if (m < classes) throw DataError("synthetic_blobs needs at least one sample per class");
    Dataset ds;
    ds.name = "blobs";
    ds.class_count = classes;
    ds.samples = Tensor({m, features});
    std::vector<std::size_t> assigned(m);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t c = i % classes;  // round-robin, balanced within +-1
        assigned[i] = c;
        for (std::size_t f = 0; f < features; ++f) {
            double center = 0.0;
            if (f == c % features) center = separation * (1.0 + static_cast<double>(c / features));
            ds.samples.at2(i, f) = center + noise(rng);
        }
    }
    ds.labels = one_hot(assigned, classes);
    return ds;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, std::size_t train_count) {
    const std::size_t m = ds.sample_count();
    if (train_count > m)
        throw DataError("split point " + std::to_string(train_count) + " beyond dataset of " +
                        std::to_string(m));
    auto slice = [&](std::size_t begin, std::size_t end) {
        Dataset out;
        out.name = ds.name;
        out.class_count = ds.class_count;
        out.norm = ds.norm;
        std::vector<std::size_t> sshape = ds.samples.shape();
        sshape[0] = end - begin;
        const std::size_t srow = ds.samples.size() / m;
        out.samples = Tensor(sshape, {ds.samples.values().begin() +
                                          static_cast<std::ptrdiff_t>(begin * srow),
                                      ds.samples.values().begin() +
                                          static_cast<std::ptrdiff_t>(end * srow)});
        out.labels = Tensor({end - begin, ds.class_count},
                            {ds.labels.values().begin() +
                                 static_cast<std::ptrdiff_t>(begin * ds.class_count),
                             ds.labels.values().begin() +
                                 static_cast<std::ptrdiff_t>(end * ds.class_count)});
        return out;
    };
    return {slice(0, train_count), slice(train_count, m)};
}

Dataset flatten_samples(const Dataset& ds) {
    Dataset out = ds;
    const std::size_t m = ds.sample_count();
    out.samples = Tensor({m, ds.samples.size() / m}, ds.samples.values());
    return out;
}

Normalization standardize_fit(const Dataset& train) {
    const std::size_t m = train.sample_count();
    const std::size_t f = train.samples.size() / m;
    Normalization norm;
    norm.kind = Normalization::Kind::standardize;
    norm.mean.assign(f, 0.0);
    norm.stddev.assign(f, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < f; ++j) norm.mean[j] += train.samples[i * f + j];
    for (double& v : norm.mean) v /= static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < f; ++j) {
            const double d = train.samples[i * f + j] - norm.mean[j];
            norm.stddev[j] += d * d;
        }
    for (double& v : norm.stddev) {
        v = std::sqrt(v / static_cast<double>(m));
        if (v == 0.0) v = 1.0;  // constant feature, leave centered at zero
    }
    return norm;
}

void standardize_apply(const Normalization& norm, Dataset& ds) {
    const std::size_t m = ds.sample_count();
    const std::size_t f = ds.samples.size() / m;
    if (norm.mean.size() != f)
        throw DataError("normalization fitted on " + std::to_string(norm.mean.size()) +
                        " features, dataset has " + std::to_string(f));
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < f; ++j)
            ds.samples[i * f + j] = (ds.samples[i * f + j] - norm.mean[j]) / norm.stddev[j];
    ds.norm = norm;
}

}  // namespace parsgd
