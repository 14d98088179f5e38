#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>

#include "fewshot/model.hpp"
#include "fewshot/tensor_io.hpp"

// Checkpoint ("MMCK"): magic, u32 version=1, u32 count, then per tensor
// {u16 name-length, name bytes, full MMTN record}. Round trips are
// bit-identical.

namespace fewshot {

constexpr std::uint32_t kMmckVersion = 1;

template <typename S>
void save_checkpoint(const std::string& path, ModelParams<S>& params) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint for writing: " + path);
  f.write("MMCK", 4);
  io_detail::write_le<std::uint32_t>(f, kMmckVersion);
  std::uint32_t count = 0;
  params.visit([&](const std::string&, Tensor<S>&, ParamKind) { ++count; });
  io_detail::write_le<std::uint32_t>(f, count);
  params.visit([&](const std::string& name, Tensor<S>& t, ParamKind) {
    io_detail::write_le<std::uint16_t>(f, std::uint16_t(name.size()));
    f.write(name.data(), std::streamsize(name.size()));
    write_mmtn(f, t);
  });
  if (!f) throw DataError("failed writing checkpoint: " + path);
}

// Loads and validates the fixed tensor set. Shape consistency across the
// heads is checked; on any defect no partial model escapes.
template <typename S>
ModelParams<S> load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint: " + path);
  char magic[4];
  if (!f.read(magic, 4) || std::memcmp(magic, "MMCK", 4) != 0)
    throw DataError("bad checkpoint magic in " + path);
  const auto version = io_detail::read_le<std::uint32_t>(f, "version");
  if (version != kMmckVersion)
    throw DataError("unsupported checkpoint version " + std::to_string(version) + " in " + path);
  const auto count = io_detail::read_le<std::uint32_t>(f, "tensor count");
  if (count > 4096) throw DataError("implausible checkpoint tensor count in " + path);

  std::map<std::string, Tensor<S>> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = io_detail::read_le<std::uint16_t>(f, "name length");
    std::string name(len, '\0');
    if (!f.read(name.data(), len)) throw DataError("truncated checkpoint: " + path);
    try {
      tensors.emplace(std::move(name), read_mmtn<S>(f));
    } catch (const DataError& e) {
      throw DataError(std::string(e.what()) + " in checkpoint " + path);
    }
  }

  ModelParams<S> p;
  p.blocks.resize(kNumBlocks);
  for (auto& blk : p.blocks) blk.bn = BnState<S>(kConvChannels);
  auto take = [&](const std::string& name) -> Tensor<S> {
    auto it = tensors.find(name);
    if (it == tensors.end())
      throw DataError("checkpoint " + path + " is missing tensor '" + name + "'");
    Tensor<S> t = std::move(it->second);
    tensors.erase(it);
    return t;
  };
  for (std::int64_t b = 0; b < kNumBlocks; ++b) {
    const std::string pre = "embed.block" + std::to_string(b + 1) + ".";
    auto& blk = p.blocks[std::size_t(b)];
    blk.conv_w = take(pre + "conv.weight");
    blk.conv_b = take(pre + "conv.bias");
    blk.gamma = take(pre + "bn.gamma");
    blk.beta = take(pre + "bn.beta");
    blk.bn.running_mean = take(pre + "bn.running_mean");
    blk.bn.running_var = take(pre + "bn.running_var");
    const std::int64_t cin = (b == 0) ? 3 : kConvChannels;
    if (blk.conv_w.shape() != Shape{kConvChannels, cin, 3, 3})
      throw DataError("checkpoint tensor '" + pre + "conv.weight' has shape " +
                      shape_str(blk.conv_w.shape()) + ", expected [64," + std::to_string(cin) +
                      ",3,3]");
    for (const auto* t : {&blk.conv_b, &blk.gamma, &blk.beta, &blk.bn.running_mean,
                          &blk.bn.running_var})
      if (t->shape() != Shape{kConvChannels})
        throw DataError("checkpoint block " + std::to_string(b + 1) +
                        " has a per-channel tensor of shape " + shape_str(t->shape()));
    for (std::int64_t i = 0; i < blk.bn.running_var.numel(); ++i)
      if (!(blk.bn.running_var[i] > S(0)))
        throw DataError("checkpoint running variance must be positive in '" + pre + "'");
  }
  p.metric_hidden_w = take("metric.hidden.weight");
  p.metric_hidden_b = take("metric.hidden.bias");
  p.metric_out_w = take("metric.out.weight");
  p.metric_out_b = take("metric.out.bias");
  p.aux_w = take("aux.weight");
  p.aux_b = take("aux.bias");
  if (!tensors.empty())
    throw DataError("checkpoint " + path + " carries unknown tensor '" + tensors.begin()->first +
                    "'");

  const std::int64_t dh = p.metric_hidden_w.dim(0);
  const std::int64_t d = p.aux_w.rank() == 2 ? p.aux_w.dim(1) : -1;
  if (d <= 0 || p.metric_hidden_w.rank() != 2 || p.metric_hidden_w.dim(1) != 3 * d)
    throw DataError("checkpoint metric.hidden.weight shape " +
                    shape_str(p.metric_hidden_w.shape()) + " inconsistent with aux.weight " +
                    shape_str(p.aux_w.shape()));
  if (p.metric_hidden_b.shape() != Shape{dh} || p.metric_out_w.shape() != Shape{1, dh} ||
      p.metric_out_b.shape() != Shape{1})
    throw DataError("checkpoint metric head shapes are inconsistent");
  if (p.aux_b.shape() != Shape{p.aux_w.dim(0)})
    throw DataError("checkpoint tensor 'aux.bias' has shape " + shape_str(p.aux_b.shape()) +
                    ", expected [" + std::to_string(p.aux_w.dim(0)) + "]");
  return p;
}

// Guards a loaded model against the run it is about to serve; names the
// offending tensor.
template <typename S>
void check_model_compat(const ModelParams<S>& p, std::int64_t image_h, std::int64_t image_w,
                        std::int64_t num_seen_classes = -1) {
  const std::int64_t d = embedding_dim(image_h, image_w);
  if (p.aux_w.dim(1) != d)
    throw DataError("checkpoint feature dim mismatch: 'aux.weight' is " +
                    shape_str(p.aux_w.shape()) + " but " + std::to_string(image_h) + "x" +
                    std::to_string(image_w) + " images embed to D=" + std::to_string(d));
  if (num_seen_classes >= 0 && p.aux_w.dim(0) != num_seen_classes)
    throw DataError("checkpoint shape mismatch: 'aux.weight' has " +
                    std::to_string(p.aux_w.dim(0)) + " classes, run expects " +
                    std::to_string(num_seen_classes));
}

}  // namespace fewshot
