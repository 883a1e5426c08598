#include <algorithm>
#include <charconv>
#include <cstring>

#include "qlab/checkpoint_io.hpp"
#include "qlab/error.hpp"

namespace qlab::io {

namespace {

std::string fmt(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}

template <class U>
U parse(const TensorFile& f, const std::string& key) {
  const std::string& s = f.meta_value(key);
  U v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw FormatError("bad value '" + s + "' for " + key);
  }
  return v;
}

template <class T>
std::vector<std::uint8_t> raw_bytes(std::span<const T> xs) {
  std::vector<std::uint8_t> out(xs.size() * sizeof(T));
  if (!out.empty()) std::memcpy(out.data(), xs.data(), out.size());
  return out;
}

std::string packed_dtype(unsigned bits) { return "u" + std::to_string(bits) + "p"; }

}  // namespace

void save_quantized(const std::filesystem::path& path, const quant::QuantizedModel& qm) {
  TensorFile f;
  f.meta.emplace_back("kind", "quantized");
  f.meta.emplace_back("step", std::to_string(qm.step));
  f.meta.emplace_back("tokens_seen", std::to_string(qm.tokens_seen));
  put_model_config(f, qm.config);
  f.meta.emplace_back("quant.bits", std::to_string(qm.qcfg.bits));
  f.meta.emplace_back("quant.group_size", std::to_string(qm.qcfg.group_size));
  f.meta.emplace_back("quant.damping_frac", fmt(qm.qcfg.damping_frac));
  f.meta.emplace_back("quant.method", quant::to_string(qm.qcfg.method));
  f.meta.emplace_back("quant.propagate_quantized", qm.qcfg.propagate_quantized ? "true" : "false");
  f.meta.emplace_back("quant.group_stats", qm.qcfg.group_stats == quant::GroupStats::kCompensated
                                               ? "compensated"
                                               : "original");
  if (!qm.source_id.empty()) f.meta.emplace_back("source", qm.source_id);

  for (const auto& spec : model::tensor_layout(qm.config)) {
    if (auto it = qm.layers.find(spec.name); it != qm.layers.end()) {
      const quant::QuantizedLinear& q = it->second;
      f.tensors.push_back({spec.name, packed_dtype(q.bits()), q.rows(), q.cols(),
                           {q.packed().begin(), q.packed().end()}});
      f.tensors.push_back({spec.name + ".scales", "f64", q.rows(), q.groups(),
                           raw_bytes<double>(q.scales().data())});
      f.tensors.push_back({spec.name + ".zeros", "u8", q.rows(), q.groups(),
                           {q.zeros().begin(), q.zeros().end()}});
    } else {
      const auto& m = qm.passthrough.at(spec.name);
      f.tensors.push_back({spec.name, "f32", m.rows(), m.cols(), raw_bytes<float>(m.data())});
    }
  }
  write_file(path, f);
}

quant::QuantizedModel load_quantized(const std::filesystem::path& path) {
  const TensorFile f = read_file(path);
  if (!f.has_meta("kind") || f.meta_value("kind") != "quantized") {
    throw FormatError(path.string() + ": not a quantized model");
  }
  quant::QuantizedModel qm;
  qm.config = model_config_from(f);
  qm.step = parse<std::uint64_t>(f, "step");
  qm.tokens_seen = parse<std::uint64_t>(f, "tokens_seen");
  qm.qcfg.bits = parse<unsigned>(f, "quant.bits");
  qm.qcfg.group_size = parse<std::size_t>(f, "quant.group_size");
  qm.qcfg.damping_frac = parse<double>(f, "quant.damping_frac");
  qm.qcfg.method = quant::parse_method(f.meta_value("quant.method"));
  qm.qcfg.propagate_quantized = f.meta_value("quant.propagate_quantized") == "true";
  qm.qcfg.group_stats = f.meta_value("quant.group_stats") == "original"
                            ? quant::GroupStats::kOriginal
                            : quant::GroupStats::kCompensated;
  if (f.has_meta("source")) qm.source_id = f.meta_value("source");

  const auto layers = model::quantizable_layers(qm.config);
  for (const auto& spec : model::tensor_layout(qm.config)) {
    const TensorRecord& t = f.tensor(spec.name);
    if (std::find(layers.begin(), layers.end(), spec.name) != layers.end()) {
      const TensorRecord& s = f.tensor(spec.name + ".scales");
      const TensorRecord& z = f.tensor(spec.name + ".zeros");
      if (t.dtype != packed_dtype(qm.qcfg.bits) || s.dtype != "f64" || z.dtype != "u8") {
        throw FormatError("layer " + spec.name + ": unexpected dtypes");
      }
      std::vector<double> sc(s.rows * s.cols);
      std::memcpy(sc.data(), s.bytes.data(), s.bytes.size());
      try {
        qm.layers.emplace(spec.name, quant::QuantizedLinear::from_parts(
                                         t.rows, t.cols, qm.qcfg.bits, qm.qcfg.group_size, t.bytes,
                                         nd::Matrix(s.rows, s.cols, std::move(sc)), z.bytes));
      } catch (const ContractViolation& e) {
        throw FormatError("layer " + spec.name + ": " + e.what());
      }
    } else {
      if (t.dtype != "f32") throw FormatError("passthrough tensor " + spec.name + " is not f32");
      std::vector<float> v(t.rows * t.cols);
      std::memcpy(v.data(), t.bytes.data(), t.bytes.size());
      qm.passthrough.emplace(spec.name, nd::MatrixF(t.rows, t.cols, std::move(v)));
    }
  }
  return qm;
}

}  // namespace qlab::io
