#include "cli_support.hpp"

#include <openssl/evp.h>

#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include "ibit/errors.hpp"

namespace ibit::cli {

namespace fs = std::filesystem;

Logger::Logger(LogFormat format, std::ostream &os)
    : format_(format), os_(os), start_(std::chrono::steady_clock::now()) {}

double Logger::elapsed() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
}

void Logger::emit(json line) {
    line["wallclock"] = elapsed();
    if (format_ == LogFormat::json) {
        os_ << line.dump() << '\n';
    } else {
        char stamp[32];
        std::snprintf(stamp, sizeof stamp, "[%8.2fs]", line["wallclock"].get<double>());
        os_ << stamp << ' ' << line["event"].get<std::string>();
        for (const auto &[k, v] : line.items()) {
            if (k == "event" || k == "wallclock")
                continue;
            os_ << ' ' << k << '=';
            if (v.is_string())
                os_ << v.get<std::string>();
            else if (v.is_number_float()) {
                char num[32];
                std::snprintf(num, sizeof num, "%.6g", v.get<double>());
                os_ << num;
            } else
                os_ << v.dump();
        }
        os_ << '\n';
    }
    os_.flush();
}

void Logger::event(const std::string &name, const json &fields) {
    json line = {{"event", name}};
    for (const auto &[k, v] : fields.items())
        line[k] = v;
    emit(std::move(line));
}

void Logger::step(const std::string &name, std::size_t step, std::size_t epoch, double loss, double lr,
                  const json &extra) {
    json line = {{"event", name}, {"step", step}, {"epoch", epoch}, {"loss", loss}, {"lr", lr}};
    for (const auto &[k, v] : extra.items())
        line[k] = v;
    emit(std::move(line));
}

json Globals::to_json() const {
    return {{"seed", seed}, {"threads", threads}, {"precision", precision}, {"log", log}};
}

Precision Globals::resolved_precision() const { return precision == "f32" ? Precision::f32 : Precision::f64; }

std::string sha256_file(const fs::path &file) {
    std::ifstream in(file, std::ios::binary);
    if (!in)
        throw FormatError("manifest: cannot read " + file.string());
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("manifest: SHA-256 unavailable");
    std::array<char, 1 << 16> buf{};
    while (in) {
        in.read(buf.data(), buf.size());
        if (in.gcount() > 0)
            EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx.get(), digest, &len);
    std::string hex;
    char byte[3];
    for (unsigned int i = 0; i < len; ++i) {
        std::snprintf(byte, sizeof byte, "%02x", digest[i]);
        hex += byte;
    }
    return hex;
}

Manifest::Manifest(fs::path dir) : dir_(std::move(dir)) {
    const fs::path existing = dir_ / "manifest.json";
    if (!fs::exists(existing))
        return;
    std::ifstream in(existing);
    try {
        const json j = json::parse(in);
        for (const auto &f : j.at("files"))
            entries_[f.at("path").get<std::string>()] = f;
    } catch (const json::exception &e) {
        throw FormatError("manifest: cannot parse " + existing.string() + ": " + e.what());
    }
}

void Manifest::add(const fs::path &file) {
    const std::string rel = fs::relative(file, dir_).generic_string();
    if (rel.empty() || rel.starts_with(".."))
        throw std::logic_error("manifest: " + file.string() + " is outside " + dir_.string());
    entries_[rel] = {{"path", rel}, {"bytes", fs::file_size(file)}, {"sha256", sha256_file(file)}};
}

fs::path Manifest::write() const {
    json files = json::array();
    for (const auto &[path, entry] : entries_)
        files.push_back(entry);
    const fs::path out = dir_ / "manifest.json";
    write_text_file(out, json{{"files", files}}.dump(2) + "\n");
    return out;
}

void ensure_directory(const fs::path &dir) {
    if (fs::exists(dir) && !fs::is_directory(dir))
        throw UsageError("output path " + dir.string() + " exists and is not a directory");
    fs::create_directories(dir);
}

json DataOptions::to_json() const {
    json j = {{"source", source}};
    if (source == "synth") {
        j["synth_train"] = synth_train;
        j["synth_test"] = synth_test;
        j["image_size"] = image_size;
        j["data_seed"] = data_seed;
    }
    return j;
}

TrainTestSplit DataOptions::load() const {
    if (source == "synth")
        return synth_split({synth_train, synth_test, image_size, data_seed});
    if (!fs::is_directory(source))
        throw UsageError("--data must be 'synth' or an existing directory, got '" + source + "'");
    return load_idx_dir(source);
}

std::pair<std::size_t, std::size_t> parse_grid(const std::string &text) {
    const auto x = text.find('x');
    std::size_t h = 0, w = 0;
    try {
        if (x == std::string::npos)
            throw std::invalid_argument("no separator");
        std::size_t used = 0;
        h = std::stoul(text.substr(0, x), &used);
        if (used != x)
            throw std::invalid_argument("trailing");
        const std::string rest = text.substr(x + 1);
        w = std::stoul(rest, &used);
        if (used != rest.size())
            throw std::invalid_argument("trailing");
    } catch (const std::exception &) {
        throw UsageError("--grid expects HxW, got '" + text + "'");
    }
    if (h == 0 || w == 0)
        throw UsageError("--grid dimensions must be positive");
    return {h, w};
}

void write_text_file(const fs::path &path, const std::string &text) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw FormatError("cannot write " + path.string());
    out << text;
    if (!out)
        throw FormatError("write failed for " + path.string());
}

} // namespace ibit::cli
