#include "tslformer/checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include "tslformer/error.hpp"

namespace tslformer {

namespace {

constexpr std::string_view kMagic = "TSLFORMER-CHECKPOINT";

std::string format_double(double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  return s.str();
}

std::vector<unsigned char> encode_payload(const ModelParams<float>& params) {
  std::vector<unsigned char> bytes;
  bytes.reserve(params.parameter_count() * 4);
  for (const auto& t : params.tensors()) {
    for (float v : t.values()) {
      auto bits = std::bit_cast<std::uint32_t>(v);
      for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<unsigned char>((bits >> (8 * b)) & 0xFFU));
    }
  }
  return bytes;
}

template <typename Int>
Int parse_int(const std::string& key, const std::string& value) {
  Int out{};
  auto [ptr, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
  if (ec != std::errc() || ptr != value.data() + value.size()) {
    throw Error(ErrorCode::CorruptPayload, "manifest field " + key + " is not an integer: '" + value + "'");
  }
  return out;
}

double parse_real(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    double out = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return out;
  } catch (const std::exception&) {
    throw Error(ErrorCode::CorruptPayload, "manifest field " + key + " is not a number: '" + value + "'");
  }
}

}  // namespace

std::uint32_t crc32(std::span<const unsigned char> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths
  std::size_t offset = 0;
  while (offset < bytes.size()) {
    auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - offset, 1U << 30));
    crc = ::crc32(crc, bytes.data() + offset, chunk);
    offset += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

void write_checkpoint(std::ostream& out, const Checkpoint& ck) {
  ck.config.validate();
  if (ck.vocabulary.size() != static_cast<std::size_t>(ck.config.num_classes)) {
    throw Error(ErrorCode::ShapeMismatch, "vocabulary size differs from num_classes");
  }
  if (ck.keypoints.size() * 3 != static_cast<std::size_t>(ck.config.input_dim)) {
    throw Error(ErrorCode::ShapeMismatch, "keypoint layout does not match input_dim");
  }
  auto payload = encode_payload(ck.params);
  const auto& c = ck.config;
  std::ostringstream m;
  m << kMagic << ' ' << kCheckpointVersion << '\n';
  m << "input_dim=" << c.input_dim << '\n';
  m << "hidden_dim=" << c.hidden_dim << '\n';
  m << "num_heads=" << c.num_heads << '\n';
  m << "num_layers=" << c.num_layers << '\n';
  m << "ffn_dim=" << c.ffn_dim << '\n';
  m << "dropout_p=" << format_double(c.dropout_p) << '\n';
  m << "num_classes=" << c.num_classes << '\n';
  m << "max_seq_len=" << c.max_seq_len << '\n';
  m << "layer_norm_eps=" << format_double(c.layer_norm_eps) << '\n';
  m << "embedding_dropout=" << (c.embedding_dropout ? 1 : 0) << '\n';
  m << "sublayer_dropout=" << (c.sublayer_dropout ? 1 : 0) << '\n';
  m << "sampler=" << ck.sampler.to_string() << '\n';
  m << "seed=" << ck.seed << '\n';
  for (const auto& [name, value] : ck.metrics) m << "metric." << name << '=' << format_double(value) << '\n';
  for (const auto& kp : ck.keypoints) m << "keypoint=" << kp << '\n';
  for (const auto& name : ck.vocabulary.names()) m << "class=" << name << '\n';
  for (const auto& [name, tensor] : ck.params.named()) m << "tensor=" << name << ' ' << ad::shape_string(tensor.shape()) << '\n';
  m << "payload_bytes=" << payload.size() << '\n';
  m << "payload_crc32=" << std::hex << std::setw(8) << std::setfill('0') << crc32(payload) << std::dec << '\n';
  m << "end\n";
  const std::string manifest = m.str();
  out.write(manifest.data(), static_cast<std::streamsize>(manifest.size()));
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!out) throw Error(ErrorCode::Io, "failed to write checkpoint");
}

Checkpoint read_checkpoint(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::TruncatedFile, "empty checkpoint");
  if (in.eof()) throw Error(ErrorCode::TruncatedFile, "checkpoint ends inside its first line");
  if (line.rfind(kMagic, 0) != 0) throw Error(ErrorCode::CorruptPayload, "not a checkpoint file");
  {
    std::string version = line.substr(kMagic.size());
    if (!version.empty() && version.front() == ' ') version.erase(0, 1);
    int v = 0;
    auto [ptr, ec] = std::from_chars(version.data(), version.data() + version.size(), v);
    if (ec != std::errc() || ptr != version.data() + version.size() || v != kCheckpointVersion) {
      throw Error(ErrorCode::VersionMismatch, "checkpoint version '" + version + "', this build reads " +
                                                  std::to_string(kCheckpointVersion));
    }
  }

  Checkpoint ck;
  std::map<std::string, std::string> fields;
  std::vector<std::string> classes;
  std::vector<std::pair<std::string, std::string>> tensors;
  bool ended = false;
  while (std::getline(in, line)) {
    if (in.eof()) throw Error(ErrorCode::TruncatedFile, "manifest ends mid-line");
    if (line == "end") {
      ended = true;
      break;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos) throw Error(ErrorCode::CorruptPayload, "bad manifest line '" + line + "'");
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    if (key == "class") {
      classes.push_back(value);
    } else if (key == "keypoint") {
      ck.keypoints.push_back(value);
    } else if (key == "tensor") {
      auto space = value.rfind(' ');
      tensors.emplace_back(value.substr(0, space), space == std::string::npos ? "" : value.substr(space + 1));
    } else if (key.rfind("metric.", 0) == 0) {
      ck.metrics.emplace_back(key.substr(7), parse_real(key, value));
    } else {
      fields[key] = value;
    }
  }
  if (!ended) throw Error(ErrorCode::TruncatedFile, "manifest ends before 'end'");

  auto need = [&](const std::string& key) -> const std::string& {
    auto it = fields.find(key);
    if (it == fields.end()) throw Error(ErrorCode::CorruptPayload, "manifest lacks " + key);
    return it->second;
  };
  auto& c = ck.config;
  c.input_dim = parse_int<int>("input_dim", need("input_dim"));
  c.hidden_dim = parse_int<int>("hidden_dim", need("hidden_dim"));
  c.num_heads = parse_int<int>("num_heads", need("num_heads"));
  c.num_layers = parse_int<int>("num_layers", need("num_layers"));
  c.ffn_dim = parse_int<int>("ffn_dim", need("ffn_dim"));
  c.dropout_p = parse_real("dropout_p", need("dropout_p"));
  c.num_classes = parse_int<int>("num_classes", need("num_classes"));
  c.max_seq_len = parse_int<int>("max_seq_len", need("max_seq_len"));
  c.layer_norm_eps = parse_real("layer_norm_eps", need("layer_norm_eps"));
  c.embedding_dropout = parse_int<int>("embedding_dropout", need("embedding_dropout")) != 0;
  c.sublayer_dropout = parse_int<int>("sublayer_dropout", need("sublayer_dropout")) != 0;
  try {
    c.validate();
    ck.sampler = FrameSampler::parse(need("sampler"));
    ck.vocabulary = ClassVocabulary(classes);
    static_cast<void>(LandmarkLayout(ck.keypoints));
  } catch (const Error& e) {
    throw Error(ErrorCode::CorruptPayload, std::string("manifest is inconsistent: ") + e.what());
  }
  ck.seed = parse_int<std::uint64_t>("seed", need("seed"));
  if (ck.vocabulary.size() != static_cast<std::size_t>(c.num_classes) ||
      ck.keypoints.size() * 3 != static_cast<std::size_t>(c.input_dim)) {
    throw Error(ErrorCode::CorruptPayload, "manifest class or keypoint count disagrees with the model config");
  }

  auto shapes = parameter_shapes(c);
  if (shapes.size() != tensors.size()) throw Error(ErrorCode::CorruptPayload, "manifest tensor list does not match the config");
  std::size_t expected_bytes = 0;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    if (tensors[i].first != shapes[i].first || tensors[i].second != ad::shape_string(shapes[i].second)) {
      throw Error(ErrorCode::CorruptPayload, "manifest tensor " + tensors[i].first + " " + tensors[i].second +
                                                 " does not match the config");
    }
    expected_bytes += 4 * ad::numel(shapes[i].second);
  }
  const auto declared = parse_int<std::size_t>("payload_bytes", need("payload_bytes"));
  if (declared != expected_bytes) throw Error(ErrorCode::CorruptPayload, "payload_bytes disagrees with the tensor list");
  std::uint32_t crc_field = 0;
  {
    const std::string& hex = need("payload_crc32");
    auto [ptr, ec] = std::from_chars(hex.data(), hex.data() + hex.size(), crc_field, 16);
    if (ec != std::errc() || ptr != hex.data() + hex.size()) throw Error(ErrorCode::CorruptPayload, "bad payload_crc32");
  }

  std::vector<unsigned char> payload(declared);
  in.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(declared));
  if (static_cast<std::size_t>(in.gcount()) != declared) {
    throw Error(ErrorCode::TruncatedFile, "payload has " + std::to_string(in.gcount()) + " of " +
                                              std::to_string(declared) + " bytes");
  }
  if (in.peek() != std::char_traits<char>::eof()) throw Error(ErrorCode::CorruptPayload, "trailing bytes after payload");
  if (crc32(payload) != crc_field) throw Error(ErrorCode::CorruptPayload, "payload CRC-32 mismatch");

  std::vector<std::pair<std::string, std::vector<float>>> values;
  std::size_t offset = 0;
  for (auto& [name, shape] : shapes) {
    std::vector<float> v(ad::numel(shape));
    for (auto& x : v) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(payload[offset + b]) << (8 * b);
      offset += 4;
      x = std::bit_cast<float>(bits);
    }
    values.emplace_back(name, std::move(v));
  }
  ck.params = params_from_named<float>(c, std::move(values));
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot open " + path.string() + " for writing");
  write_checkpoint(out, checkpoint);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  return read_checkpoint(in);
}

}  // namespace tslformer
