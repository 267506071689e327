#include <stdexcept>

#include "promptmed/core/errors.hpp"
#include "promptmed/sapnet/sapnet.hpp"

namespace promptmed {

namespace {

NamedArray conv_array(const std::string& name, const ConvWeights& w) {
  return {name + ".weight",
          {std::size_t(w.out_channels), std::size_t(w.in_channels), std::size_t(w.kernel), std::size_t(w.kernel)},
          w.weight};
}

const NamedArray& find(const std::vector<NamedArray>& v, const std::string& name) {
  for (const auto& a : v)
    if (a.name == name) return a;
  throw IoError("sapnet/1", "sapnet checkpoint: missing array " + name);
}

ConvWeights conv_from(const std::vector<NamedArray>& v, const std::string& name) {
  const auto& w = find(v, name + ".weight");
  const auto& b = find(v, name + ".bias");
  if (w.shape.size() != 4 || w.shape[2] != w.shape[3] || b.values.size() != w.shape[0])
    throw IoError("sapnet/1", "sapnet checkpoint: bad shape for " + name);
  ConvWeights c(int(w.shape[0]), int(w.shape[1]), int(w.shape[2]), 1, int(w.shape[2]) / 2);
  if (c.weight.size() != w.values.size()) throw IoError("sapnet/1", "sapnet checkpoint: bad size for " + name);
  c.weight = w.values;
  c.bias = b.values;
  return c;
}

}  // namespace

void store_sapnet(Checkpoint& ck, const SapNet& net) {
  auto& s = ck.sections[kSapnetSection];
  s.clear();
  const auto& t = net.fx.tuner;
  s.push_back(conv_array("tuner.conv1", t.conv1));
  s.push_back({"tuner.conv1.bias", {t.conv1.bias.size()}, t.conv1.bias});
  s.push_back(conv_array("tuner.conv2", t.conv2));
  s.push_back({"tuner.conv2.bias", {t.conv2.bias.size()}, t.conv2.bias});
  s.push_back({"prototype.fg", {net.protos.fg.size()}, net.protos.fg});
  s.push_back({"prototype.bg", {net.protos.bg.size()}, net.protos.bg});
  nlohmann::json meta{{"alpha", net.protos.alpha}, {"beta", net.beta}, {"use_pe", net.fx.pos.has_value()}};
  if (net.fx.pos) {
    s.push_back({"pos.B", {2, std::size_t(net.fx.pos->d)}, net.fx.pos->B});
    meta["sigma"] = net.fx.pos->sigma;
    meta["d"] = net.fx.pos->d;
  }
  ck.scalars[kSapnetSection] = meta;
}

bool has_sapnet(const Checkpoint& ck) { return ck.sections.count(kSapnetSection) > 0; }

SapNet load_sapnet(const Checkpoint& ck, const Backbone& encoder) {
  if (!has_sapnet(ck)) throw IoError("sapnet/1", "checkpoint has no sapnet/1 section");
  if (ck.descriptor.name != encoder.descriptor().name)
    throw std::invalid_argument("sapnet checkpoint was trained on backbone " + ck.descriptor.name);
  const auto& s = ck.sections.at(kSapnetSection);
  const auto it = ck.scalars.find(kSapnetSection);
  if (it == ck.scalars.end()) throw IoError("sapnet/1", "sapnet checkpoint: missing scalars");
  const auto& m = it->second;
  SapNet net;
  net.fx.encoder = &encoder;
  net.fx.tuner.conv1 = conv_from(s, "tuner.conv1");
  net.fx.tuner.conv2 = conv_from(s, "tuner.conv2");
  if (net.fx.tuner.conv1.in_channels != encoder.descriptor().embed_dim ||
      net.fx.tuner.conv2.in_channels != net.fx.tuner.conv1.out_channels)
    throw IoError("sapnet/1", "sapnet checkpoint: tuner does not fit the encoder");
  if (m.at("use_pe").get<bool>()) {
    PositionEncoder p;
    p.d = m.at("d").get<int>();
    p.sigma = m.at("sigma").get<double>();
    p.B = find(s, "pos.B").values;
    if (p.B.size() != 2 * std::size_t(p.d)) throw IoError("sapnet/1", "sapnet checkpoint: bad pos.B size");
    net.fx.pos = p;
  }
  net.protos.fg = find(s, "prototype.fg").values;
  net.protos.bg = find(s, "prototype.bg").values;
  net.protos.alpha = m.at("alpha").get<double>();
  net.beta = m.at("beta").get<double>();
  if (int(net.protos.fg.size()) != net.fx.channels() || net.protos.bg.size() != net.protos.fg.size())
    throw IoError("sapnet/1", "sapnet checkpoint: prototype size mismatch");
  return net;
}

}  // namespace promptmed
