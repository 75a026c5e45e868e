#include "vlfuzz/image_pool.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include "vlfuzz/util.hpp"

namespace vlfuzz::images {
namespace {

namespace fs = std::filesystem;

class HeaderReader {
 public:
  explicit HeaderReader(std::string_view b) : b_(b) {}

  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      const char c = b_[pos_];
      if (c == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
        ++pos_;
      } else {
        return;
      }
    }
  }

  int read_int() {
    skip_space_and_comments();
    if (pos_ >= b_.size() || b_[pos_] < '0' || b_[pos_] > '9') {
      throw DecodeError("ppm header: expected a decimal integer");
    }
    long v = 0;
    while (pos_ < b_.size() && b_[pos_] >= '0' && b_[pos_] <= '9') {
      v = v * 10 + (b_[pos_] - '0');
      if (v > 1'000'000) throw DecodeError("ppm header: value too large");
      ++pos_;
    }
    return static_cast<int>(v);
  }

  std::size_t pos() const { return pos_; }
  void advance() { ++pos_; }
  bool at_whitespace() const {
    return pos_ < b_.size() &&
           (b_[pos_] == ' ' || b_[pos_] == '\t' || b_[pos_] == '\n' || b_[pos_] == '\r');
  }

 private:
  std::string_view b_;
  std::size_t pos_ = 2;
};

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DecodeError("cannot open " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace

Image decode_ppm(std::string_view bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
    throw DecodeError("not a binary P6 ppm");
  }
  HeaderReader h(bytes);
  Image img;
  img.width = h.read_int();
  img.height = h.read_int();
  const int maxval = h.read_int();
  if (img.width <= 0 || img.height <= 0) throw DecodeError("ppm: nonpositive dimensions");
  if (maxval != 255) throw DecodeError("ppm: only maxval 255 is supported");
  if (!h.at_whitespace()) throw DecodeError("ppm: missing separator after header");
  h.advance();
  const std::size_t n = static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height) * 3;
  if (bytes.size() - h.pos() < n) throw DecodeError("ppm: truncated pixel data");
  img.pixels.assign(bytes.substr(h.pos(), n));
  return img;
}

std::string encode_ppm(const Image& img) {
  return "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n" +
         img.pixels;
}

Image read_ppm(const fs::path& path) { return decode_ppm(read_file(path)); }

void write_ppm(const fs::path& path, const Image& img) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  const std::string bytes = encode_ppm(img);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

std::string image_id(const Image& img) { return sha256_hex(img.pixels); }

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Validation: return "validation";
    case Split::Holdout: return "holdout";
  }
  return "unknown";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "validation") return Split::Validation;
  if (s == "holdout") return Split::Holdout;
  throw std::invalid_argument("unknown split: " + s);
}

std::string to_string(PerturbationKind k) {
  return k == PerturbationKind::HorizontalFlip ? "horizontal_flip" : "gaussian_noise";
}

PerturbationKind perturbation_from_string(const std::string& s) {
  if (s == "horizontal_flip") return PerturbationKind::HorizontalFlip;
  if (s == "gaussian_noise") return PerturbationKind::GaussianNoise;
  throw std::invalid_argument("unknown perturbation kind: " + s);
}

void PerturbationSpec::validate() const {
  if (kind == PerturbationKind::GaussianNoise && !(noise_sigma >= 0.0 && noise_sigma <= 0.1)) {
    throw std::invalid_argument("perturbation.noise_sigma must be in [0, 0.1]");
  }
}

nlohmann::json to_json(const PerturbationSpec& p) {
  nlohmann::json j{{"kind", to_string(p.kind)}, {"rng_seed", p.rng_seed}};
  if (p.kind == PerturbationKind::GaussianNoise) j["noise_sigma"] = p.noise_sigma;
  return j;
}

PerturbationSpec perturbation_from_json(const nlohmann::json& j) {
  PerturbationSpec p;
  p.kind = perturbation_from_string(j.at("kind").get<std::string>());
  p.rng_seed = j.value("rng_seed", std::uint64_t{0});
  p.noise_sigma = j.value("noise_sigma", 0.0);
  p.validate();
  return p;
}

Image apply_perturbation(const Image& img, const PerturbationSpec& spec) {
  spec.validate();
  Image out = img;
  if (spec.kind == PerturbationKind::HorizontalFlip) {
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        const auto src = static_cast<std::size_t>((y * img.width + x) * 3);
        const auto dst = static_cast<std::size_t>((y * img.width + (img.width - 1 - x)) * 3);
        out.pixels[dst] = img.pixels[src];
        out.pixels[dst + 1] = img.pixels[src + 1];
        out.pixels[dst + 2] = img.pixels[src + 2];
      }
    }
    return out;
  }
  if (spec.noise_sigma == 0.0) return out;
  Rng rng(spec.rng_seed);
  const double scale = spec.noise_sigma * 255.0;
  for (auto& ch : out.pixels) {
    const double v = static_cast<double>(static_cast<std::uint8_t>(ch)) + scale * rng.normal();
    const double clamped = std::clamp(std::round(v), 0.0, 255.0);
    ch = static_cast<char>(static_cast<std::uint8_t>(clamped));
  }
  return out;
}

nlohmann::json to_json(const ImageRef& r) {
  nlohmann::json j{{"id", r.id},
                   {"path", r.path},
                   {"width", r.width},
                   {"height", r.height},
                   {"split", to_string(r.split)}};
  j["parent_id"] = r.parent_id ? nlohmann::json(*r.parent_id) : nlohmann::json(nullptr);
  j["perturbation"] = r.perturbation ? to_json(*r.perturbation) : nlohmann::json(nullptr);
  return j;
}

ImageRef image_ref_from_json(const nlohmann::json& j) {
  ImageRef r;
  r.id = j.at("id").get<std::string>();
  r.path = j.at("path").get<std::string>();
  r.width = j.at("width").get<int>();
  r.height = j.at("height").get<int>();
  r.split = split_from_string(j.at("split").get<std::string>());
  if (j.contains("parent_id") && !j["parent_id"].is_null()) {
    r.parent_id = j["parent_id"].get<std::string>();
  }
  if (j.contains("perturbation") && !j["perturbation"].is_null()) {
    r.perturbation = perturbation_from_json(j["perturbation"]);
  }
  return r;
}

ImagePool::ImagePool(ImagePool&& other) noexcept {
  std::lock_guard<std::mutex> lock(other.mu_);
  order_ = std::move(other.order_);
  refs_ = std::move(other.refs_);
}

ImagePool& ImagePool::operator=(ImagePool&& other) noexcept {
  if (this != &other) {
    std::scoped_lock lock(mu_, other.mu_);
    order_ = std::move(other.order_);
    refs_ = std::move(other.refs_);
  }
  return *this;
}

ImagePool ImagePool::load(const fs::path& dir, std::array<double, 3> fractions,
                          std::uint64_t rng_seed, LoadStats* stats) {
  double sum = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) throw std::invalid_argument("split fractions must be nonnegative");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("split fractions must sum to 1");
  if (!fs::is_directory(dir)) throw std::invalid_argument("image dir not found: " + dir.string());

  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());

  LoadStats local;
  LoadStats& st = stats != nullptr ? *stats : local;
  std::map<std::string, ImageRef> unique;
  for (const auto& f : files) {
    ++st.files_seen;
    Image img;
    try {
      img = read_ppm(f);
    } catch (const DecodeError& e) {
      ++st.skipped;
      st.warnings.push_back(f.filename().string() + ": " + e.what());
      std::cerr << "warning: skipping " << f.string() << ": " << e.what() << "\n";
      continue;
    }
    const std::string id = image_id(img);
    if (unique.count(id) > 0) {
      ++st.duplicates;
      continue;
    }
    ImageRef ref;
    ref.id = id;
    ref.path = f.string();
    ref.width = img.width;
    ref.height = img.height;
    unique.emplace(id, ref);
  }
  if (unique.empty()) {
    throw std::invalid_argument("no decodable images in " + dir.string());
  }

  std::vector<std::string> ids;
  for (const auto& [id, ref] : unique) ids.push_back(id);
  Rng rng(SeedBuilder(rng_seed).add("split").seed());
  rng.shuffle(ids);

  const std::size_t n = ids.size();
  const auto n_train = std::min(n, static_cast<std::size_t>(std::llround(fractions[0] * n)));
  const auto n_val =
      std::min(n - n_train, static_cast<std::size_t>(std::llround(fractions[1] * n)));

  ImagePool pool;
  for (std::size_t i = 0; i < n; ++i) {
    ImageRef ref = unique.at(ids[i]);
    ref.split = i < n_train ? Split::Train : (i < n_train + n_val ? Split::Validation : Split::Holdout);
    pool.order_.push_back(ref.id);
    pool.refs_.emplace(ref.id, std::move(ref));
  }
  return pool;
}

std::vector<ImageRef> ImagePool::images() const {
  std::lock_guard<std::mutex> lock(mu_);
  std::vector<ImageRef> out;
  for (const auto& id : order_) out.push_back(refs_.at(id));
  return out;
}

std::vector<ImageRef> ImagePool::split(Split s) const {
  std::lock_guard<std::mutex> lock(mu_);
  std::vector<ImageRef> out;
  for (const auto& id : order_) {
    const auto& r = refs_.at(id);
    if (r.split == s && !r.parent_id) out.push_back(r);
  }
  return out;
}

std::optional<ImageRef> ImagePool::find(const std::string& id) const {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = refs_.find(id);
  if (it == refs_.end()) return std::nullopt;
  return it->second;
}

const ImageRef& ImagePool::get(const std::string& id) const {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = refs_.find(id);
  if (it == refs_.end()) throw std::out_of_range("unknown image id: " + id);
  return it->second;
}

std::size_t ImagePool::size() const {
  std::lock_guard<std::mutex> lock(mu_);
  return order_.size();
}

Image ImagePool::pixels(const std::string& id) const { return read_ppm(get(id).path); }

ImageRef ImagePool::register_derived(const std::string& parent_id, const PerturbationSpec& spec,
                                     const fs::path& blob_dir) {
  const ImageRef parent = get(parent_id);
  const Image derived = apply_perturbation(pixels(parent_id), spec);
  ImageRef ref;
  ref.id = image_id(derived);
  ref.width = derived.width;
  ref.height = derived.height;
  ref.split = parent.split;
  ref.parent_id = parent_id;
  ref.perturbation = spec;
  ref.path = (blob_dir / (ref.id + ".ppm")).string();

  std::lock_guard<std::mutex> lock(mu_);
  if (auto it = refs_.find(ref.id); it != refs_.end()) return it->second;
  fs::create_directories(blob_dir);
  if (!fs::exists(ref.path)) write_ppm(ref.path, derived);
  order_.push_back(ref.id);
  return refs_.emplace(ref.id, std::move(ref)).first->second;
}

std::string ImagePool::root_of(const std::string& id) const {
  std::lock_guard<std::mutex> lock(mu_);
  std::string cur = id;
  for (int guard = 0; guard < 64; ++guard) {
    auto it = refs_.find(cur);
    if (it == refs_.end() || !it->second.parent_id) return cur;
    cur = *it->second.parent_id;
  }
  throw std::runtime_error("parent chain too deep for " + id);
}

std::string ImagePool::manifest_jsonl() const {
  std::lock_guard<std::mutex> lock(mu_);
  std::string out;
  for (const auto& id : order_) out += to_json(refs_.at(id)).dump() + "\n";
  return out;
}

}  // namespace vlfuzz::images
