#include "retrolab/binary_io.hpp"

#include "retrolab/random.hpp"

#include <fstream>
#include <iterator>

namespace retrolab {

std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<char>& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw Error("write failed for " + path.string());
}

std::uint64_t file_digest(const std::filesystem::path& path) {
  auto data = read_file(path);
  Fnv1a h;
  h.update(data.data(), data.size());
  return h.digest();
}

}  // namespace retrolab
