#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <regex>

#include "edgerel/codegen.hpp"
#include "edgerel/model_io.hpp"
#include "support.hpp"

using namespace edgerel;
using nn::Activation;
namespace fs = std::filesystem;

namespace {

struct Run {
    int status = -1;
    std::string output;
};

Run shell(const std::string& cmd) {
    Run r;
    FILE* p = ::popen((cmd + " 2>&1").c_str(), "r");
    if (p == nullptr) return r;
    char buf[4096];
    std::size_t n;
    while ((n = std::fread(buf, 1, sizeof buf, p)) > 0) r.output.append(buf, n);
    const int st = ::pclose(p);
    r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
    return r;
}

std::string compiler() {
    const char* cc = std::getenv("EDGEREL_CC");
    return cc != nullptr && *cc != '\0' ? cc : "cc";
}

// Writes the emitted files into a fresh empty directory, compiles them with
// strict C99 flags, and runs the harness.
struct Built {
    Run compile, run;
};

Built build_and_run(const codegen::EmittedSource& e, const std::string& tag) {
    const fs::path dir = fs::temp_directory_path() / ("edgerel_codegen_" + tag);
    fs::remove_all(dir);
    fs::create_directories(dir);
    io::write_text((dir / "model.h").string(), e.header);
    io::write_text((dir / "model.c").string(), e.model);
    io::write_text((dir / "harness.c").string(), e.harness);
    Built b;
    b.compile = shell("cd '" + dir.string() + "' && " + compiler() +
                      " -std=c99 -pedantic-errors -Wall -Wextra -Werror -Wconversion -Wshadow -O1 -c model.c && " +
                      compiler() + " -std=c99 -pedantic-errors -Wall -Wextra -Werror -c harness.c && " + compiler() +
                      " -o harness model.o harness.o");
    if (b.compile.status == 0) b.run = shell("'" + (dir / "harness").string() + "'");
    fs::remove_all(dir);
    return b;
}

io::ModelFile random_codes(nn::Model m, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    io::ModelFile mf{m, std::vector<std::int64_t>(m.parameter_count()), std::nullopt, {}};
    for (std::size_t i = 0; i < mf.codes.size(); ++i) {
        const auto& f = m.spec.parameter_format(i);
        mf.codes[i] = std::uniform_int_distribution<std::int64_t>(f.min_code(), f.max_code())(rng);
    }
    return mf;
}

io::ModelFile mixed_model(std::uint64_t seed) {
    auto m = test::chain({7, 5, 4, 3}, {Activation::sigmoid, Activation::relu, Activation::linear}, test::fmt(6, 2),
                         test::fmt(14, 5), test::fmt(10, 2, false));
    m.spec.layers[1].activation_format = fx::Format{12, 4, true, fx::Rounding::truncate, fx::Overflow::wrap};
    m.spec.layers[2].bias_format = test::fmt(9, 5);
    m.spec.layers[2].activation_format = fx::Format{8, 4, false, fx::Rounding::half_even, fx::Overflow::saturate};
    return random_codes(nn::Model(m.spec), seed);
}

} // namespace

TEST(Codegen, BenchmarkEmissionPassesHarnessAtEveryWidth) {
    for (int w : {2, 4, 6, 8}) {
        nn::BenchmarkOptions o;
        o.weight_bits = w;
        const nn::Model m(nn::benchmark_spec(o));
        const auto mf = io::make_model_file(m, nn::initialize(m.spec, static_cast<std::uint64_t>(w)));
        const std::size_t n = w == 8 ? 10000 : 200;
        const auto e = codegen::emit(mf, n, 3);
        const auto b = build_and_run(e, "bench" + std::to_string(w));
        ASSERT_EQ(b.compile.status, 0) << b.compile.output;
        EXPECT_EQ(b.run.status, 0) << b.run.output;
        EXPECT_EQ(b.run.output, "ok " + std::to_string(n) + " vectors\n");
    }
}

TEST(Codegen, MixedFormatsAndSigmoidPassHarness) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        const auto mf = mixed_model(seed);
        codegen::Options o;
        o.layer_end = 3;
        const auto b = build_and_run(codegen::emit(mf, 500, seed, o), "mixed" + std::to_string(seed));
        ASSERT_EQ(b.compile.status, 0) << b.compile.output;
        EXPECT_EQ(b.run.status, 0) << b.run.output;
    }
}

TEST(Codegen, GoldenVectorsMatchInterpreterOnTenThousandInputs) {
    // Independent path: decode input codes to reals, run the bit-exact
    // forward on decoded θ, and re-encode the outputs.
    nn::BenchmarkOptions o;
    o.weight_bits = 6;
    const nn::Model m(nn::benchmark_spec(o));
    const auto mf = io::make_model_file(m, nn::initialize(m.spec, 9));
    const auto g = codegen::golden_vectors(mf, 2, 10000, 4);
    ASSERT_EQ(g.inputs.size(), 10000u);
    const int fin = m.spec.input_format.frac_bits();
    Matrix x(10000, 48);
    for (std::size_t k = 0; k < 10000; ++k)
        for (std::size_t i = 0; i < 48; ++i) x(k, i) = std::ldexp(static_cast<double>(g.inputs[k][i]), -fin);
    auto trunc = m.spec;
    trunc.layers.resize(2);
    trunc.encoder_len = 2;
    const nn::Model enc(trunc);
    const auto theta = nn::decode_parameters(m.spec, mf.codes);
    const auto y = nn::forward(enc, std::span<const double>(theta).first(enc.parameter_count()), x, nn::Mode::bit_exact).output();
    const int fout = m.spec.layers[1].activation_format.frac_bits();
    for (std::size_t k = 0; k < 10000; ++k)
        for (std::size_t j = 0; j < 16; ++j)
            ASSERT_EQ(static_cast<double>(g.expected[k][j]), std::ldexp(y(k, j), fout)) << "vector " << k << " index " << j;
    EXPECT_THROW(codegen::golden_vectors(mf, 2, 0, 4), Error);
}

TEST(Codegen, CorruptedExpectationIsReported) {
    const auto mf = mixed_model(7);
    auto e = codegen::emit(mf, 20, 1);
    e.vectors.expected[13][1] += 1;
    e.harness = codegen::emit_harness(e.vectors, "edgerel_model");
    const auto b = build_and_run(e, "corrupt");
    ASSERT_EQ(b.compile.status, 0) << b.compile.output;
    EXPECT_NE(b.run.status, 0);
    EXPECT_NE(b.run.output.find("mismatch vector=13 index=1"), std::string::npos) << b.run.output;
}

TEST(Codegen, ZeroWeightsReturnBiasCodes) {
    auto m = test::chain({5, 3}, {Activation::linear}, test::fmt(8, 2), test::fmt(16, 6));
    m.spec.layers[0].bias_format = test::fmt(16, 6);
    io::ModelFile mf{nn::Model(m.spec), std::vector<std::int64_t>(18, 0), std::nullopt, {}};
    mf.codes[15] = 100, mf.codes[16] = -32768, mf.codes[17] = 32767;
    const auto e = codegen::emit(mf, 50, 2);
    for (const auto& out : e.vectors.expected) EXPECT_EQ(out, (std::vector<std::int64_t>{100, -32768, 32767}));
    const auto b = build_and_run(e, "zero");
    ASSERT_EQ(b.compile.status, 0) << b.compile.output;
    EXPECT_EQ(b.run.status, 0) << b.run.output;
}

TEST(Codegen, StrictRejectsSaturatedMasterValues) {
    // 1.0 is not representable at W=6, I=1; the stored code is 31 (31/32).
    const auto m = test::chain({1, 1}, {Activation::linear}, test::fmt(6, 1));
    const auto mf = io::make_model_file(m, std::vector<double>{1.0, 0.0});
    ASSERT_EQ(mf.codes[0], 31);
    codegen::Options strict;
    strict.strict = true;
    try {
        codegen::emit(mf, 4, 1, strict);
        FAIL() << "strict emission should fail";
    } catch (const Error& err) {
        EXPECT_NE(std::string(err.what()).find("saturates"), std::string::npos) << err.what();
    }
    const auto e = codegen::emit(mf, 4, 1);
    EXPECT_NE(e.model.find("        31\n"), std::string::npos) << e.model;
    // Without master values there is nothing to compare against.
    auto codes_only = mf;
    codes_only.theta.reset();
    EXPECT_NO_THROW(codegen::emit(codes_only, 4, 1, strict));
}

TEST(Codegen, DeterministicAndSelfContained) {
    const auto mf = mixed_model(11);
    const auto a = codegen::emit(mf, 30, 5), b = codegen::emit(mf, 30, 5);
    EXPECT_EQ(a.header, b.header);
    EXPECT_EQ(a.model, b.model);
    EXPECT_EQ(a.harness, b.harness);
    EXPECT_EQ(a.manifest.dump(), b.manifest.dump());
    EXPECT_NE(codegen::emit(mf, 30, 6).harness, a.harness);
    EXPECT_EQ(a.manifest.at("vector_count"), 30);
    EXPECT_EQ(a.manifest.at("model_hash"), io::model_hash(mf));

    const std::regex include(R"(#include\s*[<"]([^>"]+)[>"])");
    for (const std::string* src : {&a.model, &a.header}) {
        for (std::sregex_iterator it(src->begin(), src->end(), include), end; it != end; ++it)
            EXPECT_EQ((*it)[1].str(), "stdint.h");
        EXPECT_EQ(src->find("float"), std::string::npos);
        EXPECT_EQ(src->find("double"), std::string::npos);
    }
    EXPECT_EQ(a.model.find("static int32_t"), std::string::npos); // no mutable globals
}

TEST(Codegen, Errors) {
    const auto mf = mixed_model(1);
    codegen::Options o;
    o.layer_end = 0;
    EXPECT_THROW(codegen::emit(mf, 4, 1, o), Error);
    o.layer_end = 4;
    EXPECT_THROW(codegen::emit(mf, 4, 1, o), Error);
    EXPECT_THROW(codegen::emit(mf, 0, 1), Error);
    auto wide = test::chain({2, 2}, {Activation::linear}, test::fmt(32, 4, false));
    EXPECT_THROW(codegen::emit(random_codes(wide, 1), 4, 1), Error);
}
