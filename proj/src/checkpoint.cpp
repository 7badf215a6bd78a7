#include "convcut/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <set>

#include "convcut/error.hpp"

namespace convcut {

namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'C', 'C', 'U', 'T'};

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_f32(std::vector<unsigned char>& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

class Reader {
 public:
  Reader(const std::vector<unsigned char>& bytes, const fs::path& path) : bytes_(bytes), path_(path) {}

  std::uint32_t u32(const std::string& what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string text(std::size_t n, const std::string& what) {
    need(n, what);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

  [[noreturn]] void fail(const std::string& why) const {
    throw LoadError(path_.string() + ": " + why);
  }

 private:
  void need(std::size_t n, const std::string& what) {
    if (bytes_.size() - pos_ < n) fail("truncated while reading " + what);
  }

  const std::vector<unsigned char>& bytes_;
  const fs::path& path_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const ParameterList& params, const fs::path& path) {
  std::vector<const NamedTensor*> sorted;
  for (const auto& p : params) sorted.push_back(&p);
  std::sort(sorted.begin(), sorted.end(),
            [](const NamedTensor* a, const NamedTensor* b) { return a->name < b->name; });
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i]->name == sorted[i - 1]->name) {
      throw ContractError("save_checkpoint: duplicate parameter name " + sorted[i]->name);
    }
  }

  std::vector<unsigned char> out(std::begin(kMagic), std::end(kMagic));
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(sorted.size()));
  for (const NamedTensor* p : sorted) {
    put_u32(out, static_cast<std::uint32_t>(p->name.size()));
    out.insert(out.end(), p->name.begin(), p->name.end());
    const Shape& s = p->value.shape();
    put_u32(out, static_cast<std::uint32_t>(s.rank()));
    for (std::size_t d : s.dims()) put_u32(out, static_cast<std::uint32_t>(d));
    for (float f : p->value.data()) put_f32(out, f);
  }

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw IoError("cannot write checkpoint " + path.string());
  file.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!file) throw IoError("write failed for checkpoint " + path.string());
}

void save_checkpoint(const ConvCutModel& model, const fs::path& path) {
  save_checkpoint(model.parameters(), path);
}

std::vector<CheckpointEntry> read_checkpoint(const fs::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open checkpoint " + path.string());
  const std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(file),
                                         std::istreambuf_iterator<char>()};
  Reader r(bytes, path);
  if (r.text(4, "magic") != std::string(kMagic, 4)) r.fail("bad magic, not a CCUT checkpoint");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version));
  const std::uint32_t count = r.u32("entry count");

  std::vector<CheckpointEntry> entries;
  std::set<std::string> names;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string where = "entry " + std::to_string(i);
    const std::uint32_t len = r.u32(where + " name length");
    std::string name = r.text(len, where + " name");
    if (!names.insert(name).second) r.fail("duplicate entry " + name);
    const std::uint32_t rank = r.u32(name + " rank");
    if (rank < 1 || rank > 4) r.fail(name + ": invalid rank " + std::to_string(rank));
    std::vector<std::size_t> dims;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint32_t extent = r.u32(name + " dims");
      if (extent == 0) r.fail(name + ": zero extent");
      dims.push_back(extent);
    }
    Shape shape(std::move(dims));
    std::vector<float> data(shape.numel());
    for (float& f : data) f = std::bit_cast<float>(r.u32(name + " data"));
    entries.push_back({std::move(name), std::move(shape), std::move(data)});
  }
  if (!r.at_end()) r.fail("trailing bytes after last entry");
  return entries;
}

LoadReport load_checkpoint(const fs::path& path, ConvCutModel& model, bool strict) {
  const std::vector<CheckpointEntry> entries = read_checkpoint(path);
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) by_name[e.name] = &e;

  ParameterList params = model.parameters();
  LoadReport report;
  std::set<std::string> model_names;
  for (const auto& p : params) {
    model_names.insert(p.name);
    auto it = by_name.find(p.name);
    if (it == by_name.end()) {
      report.uninitialized.push_back(p.name);
    } else if (it->second->shape != p.value.shape()) {
      report.shape_mismatch.push_back(p.name);
    } else {
      report.loaded.push_back(p.name);
    }
  }
  for (const auto& e : entries) {
    if (!model_names.contains(e.name)) report.unexpected.push_back(e.name);
  }

  if (strict) {
    std::string problems;
    auto list = [&](const std::string& kind, const std::vector<std::string>& names) {
      if (names.empty()) return;
      problems += "; " + kind + ":";
      for (const auto& n : names) problems += " " + n;
    };
    list("shape mismatch", report.shape_mismatch);
    list("missing from checkpoint", report.uninitialized);
    list("not in model", report.unexpected);
    if (!problems.empty()) throw LoadError(path.string() + problems);
  }

  for (auto& p : params) {
    auto it = by_name.find(p.name);
    if (it == by_name.end() || it->second->shape != p.value.shape()) continue;
    std::copy(it->second->data.begin(), it->second->data.end(), p.value.mutable_data().begin());
  }
  return report;
}

}  // namespace convcut
