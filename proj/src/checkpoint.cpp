#include <algorithm>

#include "encdiff/io.hpp"
#include "encdiff/training.hpp"

namespace encdiff {

namespace {

constexpr char kMagic[4] = {'E', 'N', 'C', 'D'};

void put_blob(io::ByteWriter& w, const ag::Array<float>& a) {
  for (float v : a) w.f32(v);
}

ag::Array<float> get_blob(io::ByteReader& r, Eigen::Index n) {
  r.need(static_cast<std::size_t>(n) * 4);
  ag::Array<float> a(n);
  for (auto& v : a) v = r.f32();
  return a;
}

}  // namespace

bool Checkpoint::operator==(const Checkpoint& o) const {
  auto same = [](const ag::Array<float>& a, const ag::Array<float>& b) {
    return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
  };
  return nlohmann::json(config) == nlohmann::json(o.config) && step == o.step && names == o.names && shapes == o.shapes &&
         same(params, o.params) && same(ema, o.ema) && same(adam_m, o.adam_m) && same(adam_v, o.adam_v) &&
         adam_step == o.adam_step && rng_state == o.rng_state && loss_history == o.loss_history;
}

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const auto n = ck.params.size();
  if (ck.ema.size() != n || ck.adam_m.size() != n || ck.adam_v.size() != n)
    throw std::invalid_argument("save_checkpoint: blob sizes differ");
  nlohmann::json h;
  h["config"] = ck.config;
  h["step"] = ck.step;
  h["names"] = ck.names;
  h["shapes"] = ck.shapes;
  h["parameter_count"] = n;
  h["adam_step"] = ck.adam_step;
  h["rng_state"] = ck.rng_state;
  h["loss_history"] = ck.loss_history;
  io::ByteWriter w;
  w.bytes(kMagic, 4);
  w.u32(kCheckpointVersion);
  w.str(h.dump());
  put_blob(w, ck.params);
  put_blob(w, ck.ema);
  put_blob(w, ck.adam_m);
  put_blob(w, ck.adam_v);
  w.seal();
  io::write_file(path, w.buffer());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw std::runtime_error("checkpoint not found: " + path.string());
  const auto bytes = io::read_file(path);
  {
    io::ByteReader probe(bytes);
    const auto* magic = probe.take(4);
    if (!std::equal(magic, magic + 4, kMagic)) throw io::FormatError("not an ENCD checkpoint: " + path.string());
    const auto version = probe.u32();
    if (version != kCheckpointVersion) throw io::FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto payload = io::verify_sealed(bytes);
  io::ByteReader r(payload);
  r.take(8);
  const auto h = nlohmann::json::parse(r.str());
  Checkpoint ck;
  ck.config = h.at("config").get<TrainConfig>();
  ck.step = h.at("step").get<int>();
  ck.names = h.at("names").get<std::vector<std::string>>();
  ck.shapes = h.at("shapes").get<std::vector<std::vector<int>>>();
  ck.adam_step = h.at("adam_step").get<long>();
  ck.rng_state = h.at("rng_state").get<std::string>();
  ck.loss_history = h.at("loss_history").get<std::vector<double>>();
  const auto n = h.at("parameter_count").get<Eigen::Index>();
  ck.params = get_blob(r, n);
  ck.ema = get_blob(r, n);
  ck.adam_m = get_blob(r, n);
  ck.adam_v = get_blob(r, n);
  if (r.position() != payload.size()) throw io::FormatError("trailing bytes in checkpoint");
  return ck;
}

}  // namespace encdiff
