#pragma once

// Component-keyed checkpoints and the transplant logic behind the transfer arms.
//
// Checkpoint byte layout (all integers little-endian):
//   magic     8 bytes  "MBXCKPT\0"
//   version   u32
//   kind      u8       0 = MB, 1 = MF
//   digest    u64      FNV-1a of the network config's canonical text
//   init_seed u64
//   train_step i64, adam_step i64
//   chunks    u32 count, then per chunk: u32 tag length, tag bytes, u64 payload length, payload
//   checksum  u64      FNV-1a over every preceding byte
// Component chunks are tagged by component key ("OE", "PP", ...), optimizer moments by
// "OPT/<key>", and "STATE" holds the RND normalizer. A tensor list payload is
//   u32 count, then per tensor: u32 name length, name, u32 rank, u64 dims[rank], f64 values.
// The RND target is not stored; it is regenerated from init_seed.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "mbx/agent.hpp"
#include "mbx/networks.hpp"

namespace mbx {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TransferError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr char kCheckpointMagic[8] = {'M', 'B', 'X', 'C', 'K', 'P', 'T', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) { put(v, 4); }
  void u64(std::uint64_t v) { put(v, 8); }
  void i64(std::int64_t v) { put(static_cast<std::uint64_t>(v), 8); }
  void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void bytes(const std::vector<std::uint8_t>& b) {
    u64(b.size());
    buf_.insert(buf_.end(), b.begin(), b.end());
  }
  std::vector<std::uint8_t>& buffer() { return buf_; }

 private:
  void put(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::uint8_t* p, std::size_t n) : p_(p), n_(n) {}
  explicit ByteReader(const std::vector<std::uint8_t>& b) : ByteReader(b.data(), b.size()) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(get(1)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(get(4)); }
  std::uint64_t u64() { return get(8); }
  std::int64_t i64() { return static_cast<std::int64_t>(get(8)); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(p_ + pos_), n);
    pos_ += n;
    return s;
  }
  std::vector<std::uint8_t> bytes() {
    const std::uint64_t n = u64();
    need(n);
    std::vector<std::uint8_t> b(p_ + pos_, p_ + pos_ + n);
    pos_ += n;
    return b;
  }
  void raw(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, p_ + pos_, n);
    pos_ += n;
  }
  std::size_t remaining() const { return n_ - pos_; }
  std::size_t position() const { return pos_; }

 private:
  void need(std::uint64_t n) const {
    if (n > n_ - pos_) throw CheckpointError("truncated data: need " + std::to_string(n) + " bytes at offset " +
                                             std::to_string(pos_));
  }
  std::uint64_t get(int n) {
    need(static_cast<std::uint64_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(p_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const std::uint8_t* p_;
  std::size_t n_;
  std::size_t pos_ = 0;
};

inline std::uint64_t fnv1a64_bytes(const std::uint8_t* p, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline void write_tensor(ByteWriter& w, const std::string& name, const Tensor& t) {
  w.str(name);
  w.u32(static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) w.u64(d);
  for (double v : t.data()) w.f64(v);
}

inline std::pair<std::string, Tensor> read_tensor(ByteReader& r) {
  std::string name = r.str();
  const std::uint32_t rank = r.u32();
  if (rank > 8) throw CheckpointError("tensor '" + name + "' has implausible rank");
  Shape shape(rank);
  std::uint64_t total = 1;
  for (auto& d : shape) {
    d = r.u64();
    total *= d;
  }
  if (total * 8 > r.remaining()) throw CheckpointError("tensor '" + name + "' exceeds the payload");
  std::vector<double> data(total);
  for (auto& v : data) v = r.f64();
  return {std::move(name), Tensor(std::move(shape), std::move(data))};
}

// Components stored for each agent kind.
inline std::vector<Component> checkpoint_components(AgentKind kind) {
  if (kind == AgentKind::ModelBased)
    return {Component::OE, Component::PP, Component::PRV, Component::M,
            Component::DH, Component::SPR_ONLINE, Component::SPR_TARGET, Component::RND_PRED};
  return {Component::OE,         Component::PP,         Component::PRV,     Component::MF_STEP,
          Component::SPR_ONLINE, Component::SPR_TARGET, Component::RND_PRED};
}

inline const ParameterStore& store_for(const Agent& a, Component c) {
  return c == Component::SPR_TARGET || c == Component::RND_TARGET ? a.frozen : a.online;
}
inline ParameterStore& store_for(Agent& a, Component c) {
  return c == Component::SPR_TARGET || c == Component::RND_TARGET ? a.frozen : a.online;
}

inline std::vector<std::uint8_t> encode_checkpoint(const Agent& a) {
  ByteWriter w;
  w.raw(kCheckpointMagic, 8);
  w.u32(kCheckpointVersion);
  w.u8(a.kind == AgentKind::ModelBased ? 0 : 1);
  w.u64(a.net.digest());
  w.u64(a.init_seed);
  w.i64(a.train_step);
  w.i64(a.adam_step);
  const auto comps = checkpoint_components(a.kind);
  w.u32(static_cast<std::uint32_t>(2 * comps.size() + 1));
  for (Component c : comps) {
    const ParameterStore& s = store_for(a, c);
    ByteWriter p, o;
    std::uint32_t n = 0;
    for (const auto& [name, prm] : s)
      if (component_of(name) == c) ++n;
    p.u32(n);
    o.u32(2 * n);
    for (const auto& [name, prm] : s) {
      if (component_of(name) != c) continue;
      write_tensor(p, name, prm.value);
      write_tensor(o, name + "#m", prm.adam_m);
      write_tensor(o, name + "#v", prm.adam_v);
    }
    w.str(std::string(component_name(c)));
    w.bytes(p.buffer());
    w.str("OPT/" + std::string(component_name(c)));
    w.bytes(o.buffer());
  }
  ByteWriter st;
  st.f64(a.rnd.ema_mean);
  st.f64(a.rnd.ema_var);
  st.f64(a.rnd.decay);
  st.i64(a.rnd.steps_seen);
  st.f64(a.rnd.epsilon);
  w.str("STATE");
  w.bytes(st.buffer());
  auto& buf = w.buffer();
  const std::uint64_t sum = fnv1a64_bytes(buf.data(), buf.size());
  w.u64(sum);
  return std::move(buf);
}

struct CheckpointHeader {
  AgentKind kind = AgentKind::ModelBased;
  std::uint32_t version = 0;
  std::uint64_t digest = 0;
  std::uint64_t init_seed = 0;
  std::int64_t train_step = 0;
  std::int64_t adam_step = 0;
  std::map<std::string, std::vector<std::uint8_t>> chunks;

  std::vector<Component> components() const {
    std::vector<Component> out;
    for (const auto& [tag, payload] : chunks)
      if (auto c = parse_component(tag)) out.push_back(*c);
    return out;
  }
};

inline CheckpointHeader parse_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8 + 4 + 1 + 8 * 5 + 4) throw CheckpointError("checkpoint too short");
  const std::size_t body = bytes.size() - 8;
  ByteReader tail(bytes.data() + body, 8);
  if (tail.u64() != fnv1a64_bytes(bytes.data(), body)) throw CheckpointError("checkpoint checksum mismatch");
  ByteReader r(bytes.data(), body);
  char magic[8];
  r.raw(magic, 8);
  if (std::memcmp(magic, kCheckpointMagic, 8) != 0) throw CheckpointError("not a checkpoint (bad magic)");
  CheckpointHeader h;
  h.version = r.u32();
  if (h.version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(h.version));
  const std::uint8_t kind = r.u8();
  if (kind > 1) throw CheckpointError("unknown agent kind in checkpoint");
  h.kind = kind == 0 ? AgentKind::ModelBased : AgentKind::ModelFree;
  h.digest = r.u64();
  h.init_seed = r.u64();
  h.train_step = r.i64();
  h.adam_step = r.i64();
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string tag = r.str();
    h.chunks[tag] = r.bytes();
  }
  if (r.remaining() != 0) throw CheckpointError("trailing bytes after the last chunk");
  return h;
}

inline std::map<std::string, Tensor> read_tensor_list(const std::vector<std::uint8_t>& payload) {
  ByteReader r(payload);
  const std::uint32_t n = r.u32();
  std::map<std::string, Tensor> out;
  for (std::uint32_t i = 0; i < n; ++i) {
    auto [name, t] = read_tensor(r);
    out.emplace(std::move(name), std::move(t));
  }
  if (r.remaining() != 0) throw CheckpointError("trailing bytes in tensor chunk");
  return out;
}

inline Agent decode_checkpoint(const std::vector<std::uint8_t>& bytes, const NetworkConfig& net) {
  CheckpointHeader h = parse_checkpoint(bytes);
  if (h.digest != net.digest())
    throw CheckpointError("checkpoint network config digest mismatch (checkpoint was written with a different network config)");
  Agent a = make_agent(h.kind, net, h.init_seed);
  a.train_step = h.train_step;
  a.adam_step = h.adam_step;
  for (Component c : checkpoint_components(h.kind)) {
    const std::string key(component_name(c));
    auto it = h.chunks.find(key);
    auto ot = h.chunks.find("OPT/" + key);
    if (it == h.chunks.end() || ot == h.chunks.end()) throw CheckpointError("checkpoint lacks component " + key);
    ParameterStore& s = store_for(a, c);
    auto values = read_tensor_list(it->second);
    auto moments = read_tensor_list(ot->second);
    std::size_t expected = 0;
    for (auto& [name, prm] : s) {
      if (component_of(name) != c) continue;
      ++expected;
      auto v = values.find(name);
      auto m = moments.find(name + "#m");
      auto q = moments.find(name + "#v");
      if (v == values.end() || m == moments.end() || q == moments.end())
        throw CheckpointError("checkpoint component " + key + " lacks parameter " + name);
      if (v->second.shape() != prm.value.shape())
        throw CheckpointError("shape mismatch for " + name + ": " + shape_string(v->second.shape()) + " vs " +
                              shape_string(prm.value.shape()));
      prm.value = v->second;
      prm.adam_m = m->second;
      prm.adam_v = q->second;
    }
    if (values.size() != expected) throw CheckpointError("checkpoint component " + key + " has unknown parameters");
  }
  auto st = h.chunks.find("STATE");
  if (st == h.chunks.end()) throw CheckpointError("checkpoint lacks STATE chunk");
  ByteReader r(st->second);
  a.rnd.ema_mean = r.f64();
  a.rnd.ema_var = r.f64();
  a.rnd.decay = r.f64();
  a.rnd.steps_seen = r.i64();
  a.rnd.epsilon = r.f64();
  return a;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path);
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

// Writes to a temporary sibling and renames, so a crash never leaves a half-written file in place.
inline void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline std::size_t save_checkpoint(const Agent& a, const std::string& path) {
  auto bytes = encode_checkpoint(a);
  write_file_bytes(path, bytes);
  return bytes.size();
}

inline Agent load_checkpoint(const std::string& path, const NetworkConfig& net) {
  return decode_checkpoint(read_file_bytes(path), net);
}

// ---------------------------------------------------------------------------------------------
// Transfer

struct TransferSpec {
  std::string source;  // checkpoint path; empty for a scratch agent
  std::vector<Component> components;
  std::uint64_t fresh_init_seed = 0;
  bool carry_optimizer_state = false;
  bool spr_travels_with_oe = true;
};

inline std::uint64_t arm_seed(std::uint64_t seed, const std::string& arm) { return splitmix64(seed ^ fnv1a64(arm)); }

// Transplants the requested components of `source` into a freshly initialized agent of
// `target_kind`. Target-network copies are re-synchronized from the result.
inline Agent transplant(const Agent& source, const TransferSpec& spec, AgentKind target_kind, const NetworkConfig& net,
                        double rnd_decay = 0.99) {
  if (source.net.digest() != net.digest()) throw TransferError("source and target network configs differ");
  std::set<Component> want(spec.components.begin(), spec.components.end());
  for (Component c : want) {
    const std::string key(component_name(c));
    if (c == Component::RND_PRED || c == Component::RND_TARGET)
      throw TransferError("RND components are never transferred into fine-tuning (requested " + key + ")");
    if (target_kind == AgentKind::ModelFree && (c == Component::M || c == Component::DH))
      throw TransferError("cannot transfer " + key + " into a model-free agent");
    if (target_kind == AgentKind::ModelBased && c == Component::MF_STEP)
      throw TransferError("cannot transfer MF_STEP into a model-based agent");
    if (source.kind == AgentKind::ModelBased && c == Component::MF_STEP)
      throw TransferError("model-based source has no MF_STEP component");
  }
  // From a model-free source the model and dynamics heads are necessarily fresh.
  if (source.kind == AgentKind::ModelFree) {
    want.erase(Component::M);
    want.erase(Component::DH);
  }
  if (spec.spr_travels_with_oe && want.count(Component::OE)) want.insert(Component::SPR_ONLINE);
  want.erase(Component::SPR_TARGET);  // rebuilt from the online copy below

  Agent out = make_agent(target_kind, net, spec.fresh_init_seed, rnd_decay);
  for (auto& [name, prm] : out.online) {
    const Component c = component_of(name);
    if (!want.count(c)) continue;
    if (!source.online.contains(name)) throw TransferError("source checkpoint lacks parameter " + name);
    const Parameter& src = source.online.at(name);
    if (src.value.shape() != prm.value.shape()) throw TransferError("shape mismatch for " + name);
    prm.value = src.value;
    if (spec.carry_optimizer_state) {
      prm.adam_m = src.adam_m;
      prm.adam_v = src.adam_v;
    }
  }
  if (spec.carry_optimizer_state) out.adam_step = source.adam_step;
  copy_online_to_target(out.online, out.frozen);
  return out;
}

inline Agent build_finetune_agent(const TransferSpec& spec, AgentKind target_kind, const NetworkConfig& net,
                                  double rnd_decay = 0.99) {
  if (spec.source.empty()) {
    if (!spec.components.empty()) throw TransferError("components requested without a source checkpoint");
    return make_agent(target_kind, net, spec.fresh_init_seed, rnd_decay);
  }
  if (!std::filesystem::exists(spec.source)) throw TransferError("missing source checkpoint " + spec.source);
  Agent source = load_checkpoint(spec.source, net);
  return transplant(source, spec, target_kind, net, rnd_decay);
}

// ---------------------------------------------------------------------------------------------
// Experiment arms

struct ArmSpec {
  std::string name;
  bool scratch = false;
  AgentKind source_kind = AgentKind::ModelBased;
  AgentKind target_kind = AgentKind::ModelBased;
  std::vector<Component> components;
};

inline const std::vector<ArmSpec>& all_arms() {
  using C = Component;
  static const std::vector<ArmSpec> arms = {
      {"MB->MB", false, AgentKind::ModelBased, AgentKind::ModelBased, {C::OE, C::PP, C::PRV, C::M, C::DH}},
      {"MB->MF", false, AgentKind::ModelBased, AgentKind::ModelFree, {C::OE, C::PP, C::PRV}},
      {"MF->MB", false, AgentKind::ModelFree, AgentKind::ModelBased, {C::OE, C::PP, C::PRV}},
      {"MF->MF", false, AgentKind::ModelFree, AgentKind::ModelFree, {C::OE, C::PP, C::PRV, C::MF_STEP}},
      {"Scratch", true, AgentKind::ModelBased, AgentKind::ModelBased, {}},
      {"OE", false, AgentKind::ModelBased, AgentKind::ModelBased, {C::OE}},
      {"OE+PRV", false, AgentKind::ModelBased, AgentKind::ModelBased, {C::OE, C::PRV}},
      {"OE+PH", false, AgentKind::ModelBased, AgentKind::ModelBased, {C::OE, C::PP, C::PRV}},
      {"OE+PH+M", false, AgentKind::ModelBased, AgentKind::ModelBased, {C::OE, C::PP, C::PRV, C::M}},
      {"OE+PH+M+DH", false, AgentKind::ModelBased, AgentKind::ModelBased, {C::OE, C::PP, C::PRV, C::M, C::DH}},
  };
  return arms;
}

inline const std::vector<std::string>& q1_arm_names() {
  static const std::vector<std::string> v = {"MB->MB", "MB->MF", "MF->MB", "MF->MF", "Scratch"};
  return v;
}
inline const std::vector<std::string>& ablation_arm_names() {
  static const std::vector<std::string> v = {"OE", "OE+PRV", "OE+PH", "OE+PH+M", "OE+PH+M+DH"};
  return v;
}

// Accepts canonical names plus "mb2mf"-style and unicode-arrow spellings, case-insensitively.
inline const ArmSpec& find_arm(std::string name) {
  for (const std::string arrow : {"\xE2\x86\x92", "2"}) {
    for (std::size_t p; (p = name.find(arrow)) != std::string::npos;) name.replace(p, arrow.size(), "->");
  }
  std::string lower = name;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char ch) { return std::tolower(ch); });
  for (const auto& a : all_arms()) {
    std::string al = a.name;
    std::transform(al.begin(), al.end(), al.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (al == lower) return a;
  }
  throw TransferError("unknown arm '" + name + "'");
}

}  // namespace mbx
