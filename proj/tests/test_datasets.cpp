#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "parsgd/datasets.hpp"

using namespace parsgd;

namespace {

void write_file(const std::string& path, const std::vector<unsigned char>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    REQUIRE(out.good());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    REQUIRE(out.good());
    out << text;
}

void put_be32(std::vector<unsigned char>& out, std::uint32_t v) {
    out.push_back(static_cast<unsigned char>(v >> 24));
    out.push_back(static_cast<unsigned char>(v >> 16));
    out.push_back(static_cast<unsigned char>(v >> 8));
    out.push_back(static_cast<unsigned char>(v));
}

struct IdxFixture {
    std::string images = "/tmp/parsgd_test_images.idx";
    std::string labels = "/tmp/parsgd_test_labels.idx";
    // 3 samples of 2x2 pixels and labels 0, 1, 2
    IdxFixture() {
        std::vector<unsigned char> img;
        put_be32(img, 0x00000803);
        put_be32(img, 3);
        put_be32(img, 2);
        put_be32(img, 2);
        for (unsigned char v : {0, 51, 102, 153, 204, 255, 10, 20, 30, 40, 50, 60})
            img.push_back(v);
        write_file(images, img);

        std::vector<unsigned char> lab;
        put_be32(lab, 0x00000801);
        put_be32(lab, 3);
        for (unsigned char v : {0, 1, 2}) lab.push_back(v);
        write_file(labels, lab);
    }
    ~IdxFixture() {
        std::remove(images.c_str());
        std::remove(labels.c_str());
    }
};

}  // namespace

TEST_CASE("load_idx parses images and one-hot labels with 1/255 scaling") {
    IdxFixture fx;
    const Dataset ds = load_idx(fx.images, fx.labels);
    REQUIRE(ds.sample_count() == 3);
    REQUIRE(ds.samples.shape() == std::vector<std::size_t>{3, 2, 2, 1});
    CHECK(ds.samples.at4(0, 0, 0, 0) == doctest::Approx(0.0));
    CHECK(ds.samples.at4(0, 0, 1, 0) == doctest::Approx(51.0 / 255.0));
    CHECK(ds.samples.at4(0, 1, 1, 0) == doctest::Approx(153.0 / 255.0));
    CHECK(ds.samples.at4(1, 0, 1, 0) == doctest::Approx(1.0));
    REQUIRE(ds.labels.shape() == std::vector<std::size_t>{3, 10});
    CHECK(ds.labels.at2(0, 0) == 1.0);
    CHECK(ds.labels.at2(1, 1) == 1.0);
    CHECK(ds.labels.at2(2, 2) == 1.0);
    double sum = 0;
    for (std::size_t i = 0; i < ds.labels.size(); ++i) sum += ds.labels[i];
    CHECK(sum == 3.0);
    CHECK(ds.class_count == 10);
}

TEST_CASE("load_idx rejects bad magics and count mismatches") {
    IdxFixture fx;
    CHECK_THROWS_AS(load_idx(fx.labels, fx.labels), DataError);   // wrong image magic
    CHECK_THROWS_AS(load_idx(fx.images, fx.images), DataError);   // wrong label magic
    CHECK_THROWS_AS(load_idx("/tmp/parsgd_no_such_file.idx", fx.labels), DataError);

    // label count differs from image count
    std::vector<unsigned char> lab;
    put_be32(lab, 0x00000801);
    put_be32(lab, 2);
    lab.push_back(0);
    lab.push_back(1);
    const std::string short_labels = "/tmp/parsgd_short_labels.idx";
    write_file(short_labels, lab);
    CHECK_THROWS_AS(load_idx(fx.images, short_labels), DataError);
    std::remove(short_labels.c_str());
}

TEST_CASE("load_cifar10_binary parses 3073-byte records into HWC layout") {
    const std::string path = "/tmp/parsgd_test_cifar.bin";
    std::vector<unsigned char> bytes;
    for (int rec = 0; rec < 2; ++rec) {
        bytes.push_back(static_cast<unsigned char>(rec == 0 ? 3 : 9));
        // channel-planar: 1024 R, 1024 G, 1024 B
        for (int ch = 0; ch < 3; ++ch)
            for (int px = 0; px < 1024; ++px)
                bytes.push_back(static_cast<unsigned char>((rec * 100 + ch * 50 + px) % 256));
    }
    write_file(path, bytes);

    const Dataset ds = load_cifar10_binary({path});
    REQUIRE(ds.sample_count() == 2);
    REQUIRE(ds.samples.shape() == std::vector<std::size_t>{2, 32, 32, 3});
    CHECK(ds.class_count == 10);
    CHECK(ds.labels.at2(0, 3) == 1.0);
    CHECK(ds.labels.at2(1, 9) == 1.0);
    // pixel (0,0) of record 0: planar offsets 0, 1024, 2048
    CHECK(ds.samples.at4(0, 0, 0, 0) == doctest::Approx(0.0 / 255.0));
    CHECK(ds.samples.at4(0, 0, 0, 1) == doctest::Approx(50.0 / 255.0));
    CHECK(ds.samples.at4(0, 0, 0, 2) == doctest::Approx(100.0 / 255.0));
    // pixel row 0 col 1: planar index 1
    CHECK(ds.samples.at4(0, 0, 1, 0) == doctest::Approx(1.0 / 255.0));

    // truncated file: not a multiple of 3073
    bytes.pop_back();
    write_file(path, bytes);
    CHECK_THROWS_AS(load_cifar10_binary({path}), DataError);

    // label out of range
    bytes.push_back(0);
    bytes[0] = 10;
    write_file(path, bytes);
    CHECK_THROWS_AS(load_cifar10_binary({path}), DataError);
    std::remove(path.c_str());
}

TEST_CASE("load_libsvm parses sparse rows and remaps labels ascending") {
    const std::string path = "/tmp/parsgd_test.libsvm";
    write_text(path,
               "+1 1:0.5 3:-2.0\n"
               "-1 2:1.25\n"
               "+1 4:7\n");
    const Dataset ds = load_libsvm(path, 4, 2);
    REQUIRE(ds.sample_count() == 3);
    REQUIRE(ds.samples.shape() == std::vector<std::size_t>{3, 4});
    CHECK(ds.samples.at2(0, 0) == 0.5);
    CHECK(ds.samples.at2(0, 1) == 0.0);
    CHECK(ds.samples.at2(0, 2) == -2.0);
    CHECK(ds.samples.at2(1, 1) == 1.25);
    CHECK(ds.samples.at2(2, 3) == 7.0);
    // labels -1, +1 remap to classes 0, 1 in ascending order
    CHECK(ds.labels.at2(0, 1) == 1.0);
    CHECK(ds.labels.at2(1, 0) == 1.0);
    CHECK(ds.labels.at2(2, 1) == 1.0);

    write_text(path, "+1 9:1.0\n");
    CHECK_THROWS_AS(load_libsvm(path, 4, 2), DataError);  // index out of range
    write_text(path, "+1 0:1.0\n");
    CHECK_THROWS_AS(load_libsvm(path, 4, 2), DataError);  // indices are 1-based
    write_text(path, "+1 not-a-pair\n");
    CHECK_THROWS_AS(load_libsvm(path, 4, 2), DataError);
    write_text(path, "+1 1:0.5\n-1 1:0.5\n+2 1:0.5\n");
    CHECK_THROWS_AS(load_libsvm(path, 4, 2), DataError);  // 3 labels, 2 classes
    std::remove(path.c_str());
}

TEST_CASE("synthetic_blobs is deterministic, balanced, and separable by mean") {
    const Dataset a = synthetic_blobs(90, 5, 3, 123);
    const Dataset b = synthetic_blobs(90, 5, 3, 123);
    REQUIRE(a.samples.shape() == std::vector<std::size_t>{90, 5});
    for (std::size_t i = 0; i < a.samples.size(); ++i)
        CHECK(a.samples[i] == b.samples[i]);

    std::vector<std::size_t> counts(3, 0);
    for (std::size_t i = 0; i < 90; ++i)
        for (std::size_t c = 0; c < 3; ++c)
            if (a.labels.at2(i, c) == 1.0) ++counts[c];
    CHECK(counts == std::vector<std::size_t>{30, 30, 30});

    // nearest-class-mean classification should be near perfect at the
    // default separation
    std::vector<std::vector<double>> means(3, std::vector<double>(5, 0.0));
    for (std::size_t i = 0; i < 90; ++i)
        for (std::size_t c = 0; c < 3; ++c)
            if (a.labels.at2(i, c) == 1.0)
                for (std::size_t f = 0; f < 5; ++f)
                    means[c][f] += a.samples.at2(i, f) / 30.0;
    std::size_t correct = 0;
    for (std::size_t i = 0; i < 90; ++i) {
        std::size_t best = 0;
        double best_d = 1e300;
        for (std::size_t c = 0; c < 3; ++c) {
            double d = 0;
            for (std::size_t f = 0; f < 5; ++f) {
                const double diff = a.samples.at2(i, f) - means[c][f];
                d += diff * diff;
            }
            if (d < best_d) {
                best_d = d;
                best = c;
            }
        }
        if (a.labels.at2(i, best) == 1.0) ++correct;
    }
    CHECK(static_cast<double>(correct) / 90.0 > 0.95);

    const Dataset other = synthetic_blobs(90, 5, 3, 124);
    bool any_diff = false;
    for (std::size_t i = 0; i < a.samples.size(); ++i)
        if (a.samples[i] != other.samples[i]) any_diff = true;
    CHECK(any_diff);
}

TEST_CASE("split_dataset takes a prefix and keeps the remainder") {
    const Dataset ds = synthetic_blobs(20, 3, 2, 1);
    auto [train, test] = split_dataset(ds, 15);
    CHECK(train.sample_count() == 15);
    CHECK(test.sample_count() == 5);
    for (std::size_t f = 0; f < 3; ++f) {
        CHECK(train.samples.at2(0, f) == ds.samples.at2(0, f));
        CHECK(test.samples.at2(0, f) == ds.samples.at2(15, f));
        CHECK(test.samples.at2(4, f) == ds.samples.at2(19, f));
    }
    CHECK(train.class_count == 2);
    CHECK(test.class_count == 2);
    CHECK_THROWS_AS(split_dataset(ds, 21), DataError);
}

TEST_CASE("flatten_samples collapses image dims") {
    IdxFixture fx;
    const Dataset ds = load_idx(fx.images, fx.labels);
    const Dataset flat = flatten_samples(ds);
    REQUIRE(flat.samples.shape() == std::vector<std::size_t>{3, 4});
    for (std::size_t i = 0; i < ds.samples.size(); ++i)
        CHECK(flat.samples[i] == ds.samples[i]);
}

TEST_CASE("standardize gives zero-mean unit-std train features") {
    Dataset ds = synthetic_blobs(200, 4, 2, 77);
    const Normalization norm = standardize_fit(ds);
    REQUIRE(norm.mean.size() == 4);
    REQUIRE(norm.stddev.size() == 4);
    standardize_apply(norm, ds);
    for (std::size_t f = 0; f < 4; ++f) {
        double mean = 0;
        for (std::size_t i = 0; i < 200; ++i) mean += ds.samples.at2(i, f);
        mean /= 200.0;
        double var = 0;
        for (std::size_t i = 0; i < 200; ++i) {
            const double d = ds.samples.at2(i, f) - mean;
            var += d * d;
        }
        var /= 200.0;
        CHECK(std::abs(mean) < 1e-9);
        CHECK(std::sqrt(var) == doctest::Approx(1.0).epsilon(1e-6));
    }

    // constant feature: stddev treated as 1 so the column stays finite
    Dataset flat_col = synthetic_blobs(10, 2, 2, 1);
    for (std::size_t i = 0; i < 10; ++i) flat_col.samples.at2(i, 0) = 3.0;
    const Normalization n2 = standardize_fit(flat_col);
    CHECK(n2.stddev[0] == 1.0);
    standardize_apply(n2, flat_col);
    for (std::size_t i = 0; i < 10; ++i) CHECK(flat_col.samples.at2(i, 0) == 0.0);
}
