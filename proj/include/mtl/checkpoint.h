#pragma once

#include <map>
#include <string>
#include <vector>

#include "mtl/nn.h"
#include "mtl/tensor.h"

namespace mtl {

// Portable named-tensor container. On disk:
//   [8-byte magic "MTLCKPT1"][u64 LE manifest length][manifest JSON][payload]
// The manifest maps tensor name -> dtype/shape/offset/digest and carries
// stage provenance plus config and frozen-set digests. The payload is
// contiguous little-endian f32 data in manifest order. In-memory tensors are
// doubles; values narrow to f32 on save and widen back on load.
struct CheckpointMeta {
  std::string stage;           // e.g. "pretrain:contrastive_toy", "adapt", "finetune"
  std::string config_digest;   // hex digest of the experiment config
  std::string frozen_digest;   // hex digest over the stage's frozen tensor set
};

void save_checkpoint(const std::map<std::string, Tensor>& tensors, const CheckpointMeta& meta,
                     const std::string& path);

struct LoadedCheckpoint {
  std::map<std::string, Tensor> tensors;
  CheckpointMeta meta;
};

// Verifies per-tensor digests; throws CheckpointError on corruption.
LoadedCheckpoint load_checkpoint(const std::string& path);

// Result of loading a (possibly partial) checkpoint into a model.
struct LoadReport {
  std::vector<std::string> loaded;       // copied from file
  std::vector<std::string> fresh;        // model tensors absent from the file
  std::vector<std::string> unmatched;    // file tensors absent from the model
  std::string summary() const;
};

// Copies matching tensors into the store (shapes must agree); unmatched file
// tensors are reported, not fatal. Model tensors missing from the file keep
// their current (seeded) values.
LoadReport load_into(ParamStore& ps, const LoadedCheckpoint& ck);

// Convenience wrappers for whole-model checkpoints.
void save_params(const ParamStore& ps, const CheckpointMeta& meta, const std::string& path);
LoadReport load_params(ParamStore& ps, const std::string& path, CheckpointMeta* meta_out = nullptr);

// Digest of a parameter subset (sorted by name), used for freeze verification
// and checkpoint audit chains.
std::string subset_digest(const ParamStore& ps, const std::vector<std::string>& names);

// Atomic file write: write to <path>.tmp then rename.
void atomic_write_file(const std::string& path, const std::string& bytes);
std::string read_file(const std::string& path);

}  // namespace mtl
