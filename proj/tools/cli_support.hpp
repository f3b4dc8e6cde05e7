#ifndef IBIT_TOOLS_CLI_SUPPORT_HPP_
#define IBIT_TOOLS_CLI_SUPPORT_HPP_

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>

#include "json.hpp"

#include "ibit/experiment.hpp"
#include "ibit/model.hpp"

namespace ibit::cli {

using json = nlohmann::ordered_json;

// Bad command-line input detected after parsing; exits with the usage code.
class UsageError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

// A check the command was asked to perform did not hold.
class ValidationFailure : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

enum class LogFormat { text, json };

// Structured log lines on stdout. Every line carries the elapsed wallclock;
// training lines also carry step, epoch, loss and lr.
class Logger {
  public:
    Logger(LogFormat format, std::ostream &os);
    void event(const std::string &name, const json &fields);
    void step(const std::string &name, std::size_t step, std::size_t epoch, double loss, double lr,
              const json &extra = json::object());
    double elapsed() const;

  private:
    void emit(json line);

    LogFormat format_;
    std::ostream &os_;
    std::chrono::steady_clock::time_point start_;
};

struct Globals {
    std::uint64_t seed = 0;
    bool seed_given = false;
    int threads = 0;
    std::string precision = "f64";
    bool precision_given = false;
    std::string log = "text";

    json to_json() const;
    Precision resolved_precision() const;
};

// manifest.json in a directory: every produced file with its size and
// SHA-256. Entries from earlier runs into the same directory are kept unless
// the same path is produced again.
class Manifest {
  public:
    explicit Manifest(std::filesystem::path dir);
    void add(const std::filesystem::path &file);
    // Writes the manifest and returns its path.
    std::filesystem::path write() const;
    const std::filesystem::path &dir() const noexcept { return dir_; }

  private:
    std::filesystem::path dir_;
    std::map<std::string, json> entries_;
};

std::string sha256_file(const std::filesystem::path &file);

// Creates dir (and parents); UsageError when it exists as a non-directory.
void ensure_directory(const std::filesystem::path &dir);

// "synth" or an IDX directory.
struct DataOptions {
    std::string source = "synth";
    std::size_t synth_train = 2000;
    std::size_t synth_test = 500;
    std::size_t image_size = 28;
    std::uint64_t data_seed = 1;

    json to_json() const;
    TrainTestSplit load() const;
};

// "HxW" with positive integers.
std::pair<std::size_t, std::size_t> parse_grid(const std::string &text);

void write_text_file(const std::filesystem::path &path, const std::string &text);

} // namespace ibit::cli

#endif // IBIT_TOOLS_CLI_SUPPORT_HPP_
