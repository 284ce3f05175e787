#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "photondfa/rng.hpp"
#include "photondfa/tensor.hpp"

namespace photondfa {

class data_error : public std::runtime_error {
public:
    explicit data_error(const std::string& what) : std::runtime_error(what) {}
};

struct Dataset {
    std::size_t input_dim = 0;
    std::size_t n_classes = 0;
    std::vector<Tensor> train_images;
    std::vector<int> train_labels;
    std::vector<Tensor> test_images;
    std::vector<int> test_labels;
};

namespace detail {

// 8x8 digit glyphs for the offline fallback dataset.
inline const std::array<std::array<const char*, 8>, 10>& digit_glyphs() {
    static const std::array<std::array<const char*, 8>, 10> glyphs = {{
        {"..####..", ".#....#.", ".#....#.", ".#....#.", ".#....#.", ".#....#.", "..####..",
         "........"},
        {"...##...", "..###...", "...##...", "...##...", "...##...", "...##...", "..####..",
         "........"},
        {"..####..", ".#....#.", "......#.", ".....#..", "....#...", "..##....", ".######.",
         "........"},
        {"..####..", ".#....#.", "......#.", "...###..", "......#.", ".#....#.", "..####..",
         "........"},
        {"....##..", "...#.#..", "..#..#..", ".#...#..", ".######.", ".....#..", ".....#..",
         "........"},
        {".######.", ".#......", ".#####..", "......#.", "......#.", ".#....#.", "..####..",
         "........"},
        {"..####..", ".#......", ".#......", ".#####..", ".#....#.", ".#....#.", "..####..",
         "........"},
        {".######.", "......#.", ".....#..", "....#...", "...#....", "...#....", "...#....",
         "........"},
        {"..####..", ".#....#.", ".#....#.", "..####..", ".#....#.", ".#....#.", "..####..",
         "........"},
        {"..####..", ".#....#.", ".#....#.", "..#####.", "......#.", "......#.", "..####..",
         "........"},
    }};
    return glyphs;
}

}  // namespace detail

struct SyntheticDigitsOptions {
    double pixel_noise = 0.2;    // additive Gaussian noise per pixel
    int max_shift = 2;           // uniform translation in [-max_shift, max_shift]
    double min_intensity = 0.6;  // stroke intensity drawn from [min_intensity, 1]
    std::size_t canvas = 28;     // square canvas side; 28 matches the IDX digits
    std::size_t upscale = 3;     // glyph pixel size on the canvas
    double ambiguity = 0.08;     // fraction of samples blended 50/50 with another digit
    double invert_fraction = 0.5;  // fraction rendered with inverted polarity
};

// Offline stand-in for the handwritten-digit set: ten 8x8 glyphs rendered
// onto a 28x28 canvas with jitter, intensity variation and pixel noise, so
// the [784, 100, 10] protocol runs unchanged without any downloaded data.
inline Dataset make_synthetic_digits(std::size_t n_train, std::size_t n_test, std::uint64_t seed,
                                     SyntheticDigitsOptions opts = {}) {
    const auto& glyphs = detail::digit_glyphs();
    Dataset ds;
    const std::size_t canvas = opts.canvas;
    ds.input_dim = canvas * canvas;
    ds.n_classes = 10;

    auto engine = make_engine(mix_seed(seed, 0xd161750ULL));
    std::uniform_int_distribution<int> shift(-opts.max_shift, opts.max_shift);
    std::uniform_real_distribution<double> intensity(opts.min_intensity, 1.0);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    std::uniform_int_distribution<int> other_digit(1, 9);
    std::normal_distribution<double> noise(0.0, 1.0);
    const int margin =
        (static_cast<int>(canvas) - 8 * static_cast<int>(opts.upscale)) / 2;

    // Two ingredients keep the task honest for the feedback studies: a fixed
    // fraction of samples is a 50/50 blend of two digits (irreducible
    // ambiguity, like the hard examples of real handwriting, so the error
    // signal never collapses to zero), and half the samples are rendered
    // with inverted polarity (classes stop being linearly separable, so the
    // hidden features genuinely matter).
    auto render = [&](int digit) {
        const int dx = shift(engine) + margin, dy = shift(engine) + margin;
        const double amp = intensity(engine);
        const bool inverted = uniform(engine) < opts.invert_fraction;
        const bool blended = uniform(engine) < opts.ambiguity;
        const int second = blended ? (digit + other_digit(engine)) % 10 : digit;
        Tensor img({canvas * canvas});
        for (std::size_t r = 0; r < canvas; ++r) {
            for (std::size_t c = 0; c < canvas; ++c) {
                const int gr = (static_cast<int>(r) - dy) / static_cast<int>(opts.upscale);
                const int gc = (static_cast<int>(c) - dx) / static_cast<int>(opts.upscale);
                double v = 0.0;
                if (static_cast<int>(r) >= dy && static_cast<int>(c) >= dx && gr >= 0 &&
                    gr < 8 && gc >= 0 && gc < 8) {
                    const double a = glyphs[digit][gr][gc] == '#' ? amp : 0.0;
                    const double b = glyphs[second][gr][gc] == '#' ? amp : 0.0;
                    v = blended ? 0.5 * (a + b) : a;
                }
                v += opts.pixel_noise * noise(engine);
                v = std::min(1.0, std::max(0.0, v));
                img[r * canvas + c] = inverted ? 1.0 - v : v;
            }
        }
        return img;
    };

    for (std::size_t i = 0; i < n_train; ++i) {
        const int digit = static_cast<int>(i % 10);
        ds.train_images.push_back(render(digit));
        ds.train_labels.push_back(digit);
    }
    for (std::size_t i = 0; i < n_test; ++i) {
        const int digit = static_cast<int>(i % 10);
        ds.test_images.push_back(render(digit));
        ds.test_labels.push_back(digit);
    }
    return ds;
}

// Deterministic movie-script-style text: capitalized speaker names, short
// utterances, blank lines between exchanges. Used by tests and demos so the
// language-model path runs offline.
inline std::string make_dialog_corpus(std::size_t min_chars, std::uint64_t seed) {
    static const char* speakers[] = {"JACK", "RAILLY", "COLE", "GEORGIA", "JAKE", "MARTA"};
    static const char* words[] = {"the",  "problem", "is",    "not",   "your",  "attitude",
                                  "about", "a",      "movie", "ticket", "train", "we",
                                  "can",  "fix",     "it",    "here",  "now",   "again",
                                  "right", "think",  "you",   "were",  "looking", "for",
                                  "this", "time",    "story", "script", "light", "scene"};
    auto engine = make_engine(mix_seed(seed, 0xd1a106ULL));
    std::uniform_int_distribution<int> speaker(0, 5);
    std::uniform_int_distribution<int> word(0, 29);
    std::uniform_int_distribution<int> line_words(4, 9);
    std::uniform_int_distribution<int> lines(2, 4);
    std::string out;
    while (out.size() < min_chars) {
        const int n_lines = lines(engine);
        for (int l = 0; l < n_lines; ++l) {
            out += speakers[speaker(engine)];
            out += ": ";
            const int n = line_words(engine);
            for (int w = 0; w < n; ++w) {
                if (w) out += ' ';
                out += words[word(engine)];
            }
            out += ".\n";
        }
        out += "\n";
    }
    return out;
}

namespace detail {

inline std::uint32_t read_be_u32(std::istream& in, const std::string& path) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw data_error("truncated IDX file: " + path);
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
           std::uint32_t(b[3]);
}

}  // namespace detail

// IDX image file (magic 0x00000803), pixel bytes scaled to [0,1].
inline std::vector<Tensor> load_idx_images(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("cannot open IDX image file: " + path);
    if (detail::read_be_u32(in, path) != 0x00000803u) {
        throw data_error("bad IDX image magic in " + path);
    }
    const std::uint32_t n = detail::read_be_u32(in, path);
    const std::uint32_t rows = detail::read_be_u32(in, path);
    const std::uint32_t cols = detail::read_be_u32(in, path);
    const std::size_t dim = static_cast<std::size_t>(rows) * cols;
    std::vector<Tensor> images;
    images.reserve(n);
    std::vector<unsigned char> buf(dim);
    for (std::uint32_t i = 0; i < n; ++i) {
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(dim));
        if (!in) throw data_error("truncated IDX image data: " + path);
        Tensor img({dim});
        for (std::size_t p = 0; p < dim; ++p) img[p] = buf[p] / 255.0;
        images.push_back(std::move(img));
    }
    return images;
}

// IDX label file (magic 0x00000801).
inline std::vector<int> load_idx_labels(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw data_error("cannot open IDX label file: " + path);
    if (detail::read_be_u32(in, path) != 0x00000801u) {
        throw data_error("bad IDX label magic in " + path);
    }
    const std::uint32_t n = detail::read_be_u32(in, path);
    std::vector<int> labels(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        char c;
        in.read(&c, 1);
        if (!in) throw data_error("truncated IDX label data: " + path);
        labels[i] = static_cast<unsigned char>(c);
    }
    return labels;
}

// Standard MNIST layout: train-images-idx3-ubyte, train-labels-idx1-ubyte,
// t10k-images-idx3-ubyte, t10k-labels-idx1-ubyte under one directory.
inline Dataset load_mnist(const std::string& dir) {
    Dataset ds;
    ds.train_images = load_idx_images(dir + "/train-images-idx3-ubyte");
    ds.train_labels = load_idx_labels(dir + "/train-labels-idx1-ubyte");
    ds.test_images = load_idx_images(dir + "/t10k-images-idx3-ubyte");
    ds.test_labels = load_idx_labels(dir + "/t10k-labels-idx1-ubyte");
    if (ds.train_images.empty() || ds.train_images.size() != ds.train_labels.size() ||
        ds.test_images.size() != ds.test_labels.size()) {
        throw data_error("inconsistent MNIST files in " + dir);
    }
    ds.input_dim = ds.train_images.front().size();
    ds.n_classes = 10;
    return ds;
}

}  // namespace photondfa
