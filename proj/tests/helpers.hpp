#ifndef IBIT_TESTS_HELPERS_HPP_
#define IBIT_TESTS_HELPERS_HPP_

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <unistd.h>
#include <vector>

#include "ibit/matrix.hpp"

namespace ibit::testing {

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64 &rng, double lo = -1.0,
                            double hi = 1.0) {
    return Matrix::uniform(rows, cols, lo, hi, rng);
}

inline std::vector<char> read_bytes(const std::filesystem::path &p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
  public:
    explicit TempDir(const std::string &tag) {
        static std::uint64_t counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("ibit_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir &) = delete;
    TempDir &operator=(const TempDir &) = delete;
    const std::filesystem::path &path() const { return path_; }
    std::filesystem::path operator/(const std::string &name) const { return path_ / name; }

  private:
    std::filesystem::path path_;
};

} // namespace ibit::testing

#endif // IBIT_TESTS_HELPERS_HPP_
