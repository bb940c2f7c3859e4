#include "staincycle/io_store.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace staincycle::io {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- image codec -----------------------------------------------------------

std::vector<std::uint8_t> encode_image(const ImagePatch& patch) {
  check_image_range(patch, "encode_image input");
  // [-1,1] -> [0,255], round-half-even (torch::round ties to even).
  auto scaled = torch::round((patch + 1.0) * 0.5 * 255.0).clamp(0, 255).to(torch::kUInt8);
  auto hwc = scaled.permute({1, 2, 0}).contiguous();  // HxWx3, RGB
  cv::Mat rgb(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), CV_8UC3,
              hwc.data_ptr<std::uint8_t>());
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  std::vector<std::uint8_t> out;
  if (!cv::imencode(".png", bgr, out)) {
    throw std::runtime_error("PNG encoding failed");
  }
  return out;
}

ImagePatch decode_image(const std::vector<std::uint8_t>& png_bytes) {
  cv::Mat bgr = cv::imdecode(png_bytes, cv::IMREAD_COLOR);
  if (bgr.empty()) throw std::runtime_error("PNG decoding failed");
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  auto t = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8).clone();
  return t.permute({2, 0, 1}).to(torch::kFloat32) / 255.0 * 2.0 - 1.0;
}

void save_image(const fs::path& path, const ImagePatch& patch) {
  auto bytes = encode_image(patch);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

ImagePatch load_image(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return decode_image(bytes);
}

void save_mask(const fs::path& path, const torch::Tensor& mask) {
  if (mask.dim() != 2) throw std::invalid_argument("mask must be HxW");
  auto m8 = (mask.to(torch::kBool).to(torch::kUInt8) * 255).contiguous();
  cv::Mat m(static_cast<int>(m8.size(0)), static_cast<int>(m8.size(1)), CV_8UC1,
            m8.data_ptr<std::uint8_t>());
  if (!cv::imwrite(path.string(), m, {cv::IMWRITE_PNG_BILEVEL, 1})) {
    throw std::runtime_error("mask write failed: " + path.string());
  }
}

torch::Tensor load_mask(const fs::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_GRAYSCALE);
  if (m.empty()) throw std::runtime_error("mask read failed: " + path.string());
  auto t = torch::from_blob(m.data, {m.rows, m.cols}, torch::kUInt8).clone();
  return t > 127;
}

// ---- hashing ----------------------------------------------------------------

std::uint64_t fnv1a(const void* data, std::size_t n) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  std::uint64_t h = 14695981039346656037ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t fnv1a(const std::vector<std::uint8_t>& bytes) {
  return fnv1a(bytes.data(), bytes.size());
}

std::uint64_t file_hash(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return fnv1a(bytes);
}

std::uint64_t config_hash(const json& config) {
  const std::string canonical = config.dump();  // nlohmann orders object keys
  return fnv1a(canonical.data(), canonical.size());
}

// ---- manifests --------------------------------------------------------------

json Manifest::to_json() const {
  json j;
  j["schema_version"] = schema_version;
  j["config_hash"] = config_hash;
  json es = json::array();
  for (const auto& e : entries) {
    es.push_back({{"path", e.path}, {"role", e.role}, {"seed", e.seed}, {"split", e.split}});
  }
  j["entries"] = es;
  return j;
}

Manifest Manifest::from_json(const json& j) {
  Manifest m;
  m.schema_version = j.at("schema_version").get<int>();
  m.config_hash = j.at("config_hash").get<std::uint64_t>();
  for (const auto& e : j.at("entries")) {
    m.entries.push_back({e.at("path").get<std::string>(), e.at("role").get<std::string>(),
                         e.at("seed").get<std::uint64_t>(), e.at("split").get<std::string>()});
  }
  return m;
}

void atomic_write(const fs::path& path, const std::string& contents) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + tmp.string());
    f << contents;
  }
  fs::rename(tmp, path);
}

void save_manifest(const fs::path& path, const Manifest& m) {
  atomic_write(path, m.to_json().dump(2));
}

Manifest load_manifest(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  json j = json::parse(f);
  Manifest m = Manifest::from_json(j);
  if (m.schema_version != kSchemaVersion) {
    throw std::runtime_error("manifest schema version mismatch");
  }
  const fs::path base = path.parent_path();
  for (const auto& e : m.entries) {
    if (!fs::exists(base / e.path)) {
      throw std::runtime_error("manifest references missing file: " + e.path);
    }
  }
  return m;
}

// ---- checkpoints -------------------------------------------------------------

void save_checkpoint(const fs::path& dir,
                     const std::map<std::string, std::shared_ptr<torch::nn::Module>>& modules,
                     const json& meta) {
  fs::create_directories(dir);
  json files = json::object();
  for (const auto& [name, mod] : modules) {
    const fs::path p = dir / (name + ".pt");
    torch::serialize::OutputArchive archive;
    mod->save(archive);
    archive.save_to(p.string());
    files[name] = file_hash(p);
  }
  json j;
  j["schema_version"] = kSchemaVersion;
  j["files"] = files;
  j["meta"] = meta;
  atomic_write(dir / "meta.json", j.dump(2));
}

json read_checkpoint_meta(const fs::path& dir) {
  std::ifstream f(dir / "meta.json");
  if (!f) throw std::runtime_error("missing meta.json in " + dir.string());
  json j = json::parse(f);
  if (j.at("schema_version").get<int>() != kSchemaVersion) {
    throw std::runtime_error("checkpoint schema version mismatch in " + dir.string());
  }
  return j;
}

json load_checkpoint(const fs::path& dir,
                     const std::map<std::string, std::shared_ptr<torch::nn::Module>>& modules) {
  json j = read_checkpoint_meta(dir);
  for (const auto& [name, mod] : modules) {
    const fs::path p = dir / (name + ".pt");
    if (!j.at("files").contains(name)) {
      throw std::runtime_error("checkpoint missing module: " + name);
    }
    if (file_hash(p) != j.at("files").at(name).get<std::uint64_t>()) {
      throw std::runtime_error("checkpoint integrity error: " + p.string());
    }
    torch::serialize::InputArchive archive;
    archive.load_from(p.string());
    mod->load(archive);
  }
  return j.at("meta");
}

}  // namespace staincycle::io
