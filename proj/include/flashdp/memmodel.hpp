#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flashdp/errors.hpp"
#include "json.hpp"

namespace flashdp {

/// Scratchpad capacity (per simulated block) and element byte width.
struct MemSpec {
  std::size_t scratchpad_capacity_bytes = 0;
  std::size_t dtype_width_bytes = 8;

  std::size_t capacity_elements() const { return scratchpad_capacity_bytes / dtype_width_bytes; }

  void validate() const {
    if (dtype_width_bytes != 2 && dtype_width_bytes != 4 && dtype_width_bytes != 8) {
      throw UsageError("dtype_width_bytes must be 2, 4 or 8, got " +
                       std::to_string(dtype_width_bytes));
    }
    if (scratchpad_capacity_bytes < dtype_width_bytes) {
      throw UsageError("scratchpad_capacity_bytes (" + std::to_string(scratchpad_capacity_bytes) +
                       ") must hold at least one element of width " +
                       std::to_string(dtype_width_bytes));
    }
  }
};

/// Counters accumulated over one instrumented run.
struct TrafficReport {
  std::uint64_t bytes_loaded = 0;
  std::uint64_t bytes_stored = 0;
  std::uint64_t flops = 0;
  std::uint64_t redundant_flops = 0;
  std::uint64_t barriers = 0;
  std::uint64_t kernel_launches = 0;
  std::uint64_t peak_scratch_bytes = 0;
  std::uint64_t per_sample_grad_bytes_stored = 0;

  TrafficReport& operator+=(const TrafficReport& o) {
    bytes_loaded += o.bytes_loaded;
    bytes_stored += o.bytes_stored;
    flops += o.flops;
    redundant_flops += o.redundant_flops;
    barriers += o.barriers;
    kernel_launches += o.kernel_launches;
    peak_scratch_bytes = std::max(peak_scratch_bytes, o.peak_scratch_bytes);
    per_sample_grad_bytes_stored += o.per_sample_grad_bytes_stored;
    return *this;
  }

  bool operator==(const TrafficReport&) const = default;
};

enum class Level { main, scratch };

enum class StoreTag { plain, per_sample_grad };

/// Opaque handle to a region owned by a MemSim.
struct RegionId {
  std::uint32_t value = UINT32_MAX;
  bool operator==(const RegionId&) const = default;
};

class MemSim;

/// RAII scope of one kernel launch; ends the kernel when destroyed.
class KernelScope {
 public:
  KernelScope(const KernelScope&) = delete;
  KernelScope& operator=(const KernelScope&) = delete;
  KernelScope(KernelScope&& other) noexcept : sim_(std::exchange(other.sim_, nullptr)) {}
  KernelScope& operator=(KernelScope&&) = delete;
  ~KernelScope();

  /// Ends the kernel early; the destructor then does nothing.
  void end();

 private:
  friend class MemSim;
  explicit KernelScope(MemSim* sim) : sim_(sim) {}
  MemSim* sim_;
};

/// Two-level memory simulator: main memory plus one bounded scratchpad per
/// simulated block.
///
/// Data really lives in the regions, so workflows compute on scratch contents
/// and results flow back through explicit stores. Every main<->scratch
/// transfer is charged at element granularity (count * dtype width). Scratch
/// regions belong to the block that allocated them and die with the kernel.
/// Atomic accumulations into main memory stay pending until a barrier (or the
/// end of the kernel); reading a pending element raises OrderingFault.
class MemSim {
 public:
  explicit MemSim(MemSpec spec) : spec_(spec) { spec_.validate(); }

  const MemSpec& spec() const noexcept { return spec_; }
  const TrafficReport& report() const noexcept { return report_; }
  bool kernel_open() const noexcept { return kernel_open_; }

  // ---- host side: main-memory regions ---------------------------------

  /// Zero-initialized main-memory region. Host allocation moves no traffic.
  RegionId alloc_main(std::size_t elements) {
    if (elements == 0) throw UsageError("region element_count must be >= 1");
    return add_region(Level::main, std::vector<double>(elements, 0.0));
  }

  /// Main-memory region initialized from host data (the tensors a backward
  /// pass starts from).
  RegionId upload_main(std::span<const double> values) {
    if (values.empty()) throw UsageError("region element_count must be >= 1");
    return add_region(Level::main, std::vector<double>(values.begin(), values.end()));
  }

  /// Host read of a main region; all pending atomics must be visible.
  std::span<const double> main_data(RegionId id) const {
    const auto& r = region(id);
    if (r.level != Level::main) throw UsageError("main_data on a scratch region");
    if (std::find(r.pending.begin(), r.pending.end(), char{1}) != r.pending.end()) {
      throw OrderingFault("host read of main region with pending atomic updates");
    }
    return r.data;
  }

  Level level(RegionId id) const { return region(id).level; }
  std::size_t element_count(RegionId id) const { return region(id).data.size(); }

  /// Total bytes loaded from a particular main region.
  std::uint64_t bytes_loaded_from(RegionId id) const {
    auto it = loaded_from_.find(id.value);
    return it == loaded_from_.end() ? 0 : it->second;
  }

  // ---- kernels ----------------------------------------------------------

  [[nodiscard]] KernelScope begin_kernel() {
    if (kernel_open_) throw UsageError("begin_kernel: a kernel is already open");
    kernel_open_ = true;
    ++epoch_;
    ++report_.kernel_launches;
    current_block_ = 0;
    resident_.clear();
    return KernelScope(this);
  }

  void end_kernel() {
    if (!kernel_open_) throw UsageError("end_kernel: no kernel is open");
    for (auto id : kernel_scratch_) {
      auto& r = regions_[id];
      r.live = false;
      r.data.clear();
      r.data.shrink_to_fit();
    }
    kernel_scratch_.clear();
    make_pending_visible();
    resident_.clear();
    kernel_open_ = false;
  }

  /// Selects which simulated block subsequent scratch operations run on.
  void select_block(std::size_t block) {
    require_kernel("select_block");
    current_block_ = block;
  }
  std::size_t current_block() const noexcept { return current_block_; }

  // ---- scratch ------------------------------------------------------------

  /// Zero-filled scratch buffer for on-chip results (no traffic).
  RegionId alloc_scratch(std::size_t elements) {
    require_kernel("alloc_scratch");
    if (elements == 0) throw UsageError("alloc_scratch: element_count must be >= 1");
    reserve(elements);
    return add_scratch(std::vector<double>(elements, 0.0));
  }

  /// Contiguous load of `elements` values starting at `offset`.
  RegionId load_to_scratch(RegionId src, std::size_t elements, std::size_t offset = 0) {
    require_kernel("load_to_scratch");
    auto& s = main_region(src, "load_to_scratch");
    if (elements == 0 || offset + elements > s.data.size()) {
      throw UsageError("load_to_scratch: requested [" + std::to_string(offset) + ", " +
                       std::to_string(offset + elements) + ") of a " +
                       std::to_string(s.data.size()) + "-element region");
    }
    check_visible(s, offset, elements);
    reserve(elements);
    charge_load(src, elements);
    std::vector<double> buf(s.data.begin() + static_cast<std::ptrdiff_t>(offset),
                            s.data.begin() + static_cast<std::ptrdiff_t>(offset + elements));
    return add_scratch(std::move(buf));
  }

  /// Strided load: element i of the scratch region is src[indices[i]].
  RegionId gather_to_scratch(RegionId src, std::span<const std::size_t> indices) {
    require_kernel("gather_to_scratch");
    auto& s = main_region(src, "gather_to_scratch");
    if (indices.empty()) throw UsageError("gather_to_scratch: empty index list");
    std::vector<double> buf(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (indices[i] >= s.data.size()) throw UsageError("gather_to_scratch: index out of range");
      if (s.pending[indices[i]]) throw_pending();
      buf[i] = s.data[indices[i]];
    }
    reserve(indices.size());
    charge_load(src, indices.size());
    return add_scratch(std::move(buf));
  }

  /// Stores the first `elements` values of a scratch region to dst[offset...].
  void store_to_main(RegionId src, RegionId dst, std::size_t elements, StoreTag tag,
                     std::size_t offset = 0) {
    require_kernel("store_to_main");
    auto& s = scratch_region(src, "store_to_main");
    auto& d = main_region(dst, "store_to_main");
    if (elements == 0 || elements > s.data.size() || offset + elements > d.data.size()) {
      throw UsageError("store_to_main: " + std::to_string(elements) + " elements from a " +
                       std::to_string(s.data.size()) + "-element scratch region into [" +
                       std::to_string(offset) + ", ...) of a " + std::to_string(d.data.size()) +
                       "-element main region");
    }
    std::copy_n(s.data.begin(), elements, d.data.begin() + static_cast<std::ptrdiff_t>(offset));
    charge_store(elements, tag);
  }

  /// Strided store: dst[indices[i]] = src[i].
  void scatter_to_main(RegionId src, RegionId dst, std::span<const std::size_t> indices,
                       StoreTag tag) {
    require_kernel("scatter_to_main");
    auto& s = scratch_region(src, "scatter_to_main");
    auto& d = main_region(dst, "scatter_to_main");
    if (indices.empty() || indices.size() > s.data.size()) {
      throw UsageError("scatter_to_main: index count does not fit the scratch region");
    }
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (indices[i] >= d.data.size()) throw UsageError("scatter_to_main: index out of range");
      d.data[indices[i]] = s.data[i];
    }
    charge_store(indices.size(), tag);
  }

  /// In-place atomic add into main memory: dst[offset + i] += values[i].
  /// One store per element, no load. The updates stay pending until a barrier.
  void atomic_accumulate(RegionId dst, std::span<const double> values, std::size_t offset = 0) {
    require_kernel("atomic_accumulate");
    auto& d = main_region(dst, "atomic_accumulate");
    if (values.empty() || offset + values.size() > d.data.size()) {
      throw UsageError("atomic_accumulate: " + std::to_string(values.size()) +
                       " values at offset " + std::to_string(offset) + " into a " +
                       std::to_string(d.data.size()) + "-element region");
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
      d.data[offset + i] += values[i];
      d.pending[offset + i] = 1;
    }
    charge_store(values.size(), StoreTag::plain);
  }

  /// Scattered atomic add: dst[indices[i]] += values[i].
  void atomic_accumulate_at(RegionId dst, std::span<const std::size_t> indices,
                            std::span<const double> values) {
    require_kernel("atomic_accumulate_at");
    auto& d = main_region(dst, "atomic_accumulate_at");
    if (indices.empty() || indices.size() != values.size()) {
      throw UsageError("atomic_accumulate_at: index and value counts differ");
    }
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (indices[i] >= d.data.size()) throw UsageError("atomic_accumulate_at: index out of range");
      d.data[indices[i]] += values[i];
      d.pending[indices[i]] = 1;
    }
    charge_store(indices.size(), StoreTag::plain);
  }

  /// Grid-wide synchronization point; makes all pending atomics visible.
  void barrier() {
    require_kernel("barrier");
    ++report_.barriers;
    make_pending_visible();
  }

  void record_flops(std::uint64_t n, bool redundant = false) {
    require_kernel("record_flops");
    report_.flops += n;
    if (redundant) report_.redundant_flops += n;
  }

  /// Mutable view of a live scratch region owned by the current block.
  std::span<double> scratch(RegionId id) { return scratch_region(id, "scratch").data; }

  void free_scratch(RegionId id) {
    auto& r = scratch_region(id, "free_scratch");
    resident_[r.block] -= r.data.size();
    r.live = false;
    r.data.clear();
    r.data.shrink_to_fit();
  }

  /// Elements currently resident in the current block's scratchpad.
  std::size_t resident_elements() const {
    auto it = resident_.find(current_block_);
    return it == resident_.end() ? 0 : it->second;
  }

 private:
  friend class KernelScope;

  struct Region {
    Level level = Level::main;
    std::vector<double> data;
    std::vector<char> pending;  // main only
    std::uint64_t epoch = 0;    // scratch only
    std::size_t block = 0;      // scratch only
    bool live = true;
  };

  RegionId add_region(Level level, std::vector<double> data) {
    Region r;
    r.level = level;
    if (level == Level::main) r.pending.assign(data.size(), 0);
    r.data = std::move(data);
    r.epoch = epoch_;
    r.block = current_block_;
    regions_.push_back(std::move(r));
    const auto id = static_cast<std::uint32_t>(regions_.size() - 1);
    (level == Level::main ? main_ids_ : kernel_scratch_).push_back(id);
    return RegionId{id};
  }

  void make_pending_visible() {
    for (auto id : main_ids_) {
      auto& p = regions_[id].pending;
      std::fill(p.begin(), p.end(), char{0});
    }
  }

  RegionId add_scratch(std::vector<double> data) { return add_region(Level::scratch, std::move(data)); }

  const Region& region(RegionId id) const {
    if (id.value >= regions_.size()) throw UsageError("unknown region handle");
    return regions_[id.value];
  }
  Region& region(RegionId id) {
    if (id.value >= regions_.size()) throw UsageError("unknown region handle");
    return regions_[id.value];
  }

  Region& main_region(RegionId id, const char* op) {
    auto& r = region(id);
    if (r.level != Level::main) throw UsageError(std::string(op) + ": expected a main-memory region");
    return r;
  }

  Region& scratch_region(RegionId id, const char* op) {
    auto& r = region(id);
    if (r.level != Level::scratch) throw UsageError(std::string(op) + ": expected a scratch region");
    if (r.epoch != epoch_ || !kernel_open_) {
      throw UsageError(std::string(op) + ": scratch region from kernel " + std::to_string(r.epoch) +
                       " does not survive into kernel " + std::to_string(epoch_));
    }
    if (!r.live) throw UsageError(std::string(op) + ": scratch region already freed");
    if (r.block != current_block_) {
      throw UsageError(std::string(op) + ": scratch region belongs to block " +
                       std::to_string(r.block) + ", current block is " +
                       std::to_string(current_block_));
    }
    return r;
  }

  void require_kernel(const char* op) const {
    if (!kernel_open_) throw UsageError(std::string(op) + " requires an open kernel");
  }

  void reserve(std::size_t elements) {
    const std::size_t width = spec_.dtype_width_bytes;
    const std::size_t resident = resident_[current_block_];
    const std::size_t used_bytes = resident * width;
    const std::size_t requested = elements * width;
    if (used_bytes + requested > spec_.scratchpad_capacity_bytes) {
      throw CapacityError(requested, spec_.scratchpad_capacity_bytes - used_bytes);
    }
    resident_[current_block_] = resident + elements;
    report_.peak_scratch_bytes =
        std::max<std::uint64_t>(report_.peak_scratch_bytes, (resident + elements) * width);
  }

  void check_visible(const Region& r, std::size_t offset, std::size_t elements) const {
    for (std::size_t i = offset; i < offset + elements; ++i) {
      if (r.pending[i]) throw_pending();
    }
  }

  [[noreturn]] static void throw_pending() {
    throw OrderingFault("read of an all-reduce destination before the barrier made its "
                        "atomic updates visible");
  }

  void charge_load(RegionId src, std::size_t elements) {
    const std::uint64_t bytes = std::uint64_t{elements} * spec_.dtype_width_bytes;
    report_.bytes_loaded += bytes;
    loaded_from_[src.value] += bytes;
  }

  void charge_store(std::size_t elements, StoreTag tag) {
    const std::uint64_t bytes = std::uint64_t{elements} * spec_.dtype_width_bytes;
    report_.bytes_stored += bytes;
    if (tag == StoreTag::per_sample_grad) report_.per_sample_grad_bytes_stored += bytes;
  }

  MemSpec spec_;
  TrafficReport report_;
  std::vector<Region> regions_;
  std::vector<std::uint32_t> main_ids_;
  std::vector<std::uint32_t> kernel_scratch_;
  std::map<std::uint32_t, std::uint64_t> loaded_from_;
  std::map<std::size_t, std::size_t> resident_;
  std::uint64_t epoch_ = 0;
  std::size_t current_block_ = 0;
  bool kernel_open_ = false;
};

inline KernelScope::~KernelScope() {
  if (sim_ && sim_->kernel_open()) sim_->end_kernel();
}

inline void KernelScope::end() {
  if (sim_) {
    sim_->end_kernel();
    sim_ = nullptr;
  }
}

/// Flat JSON object keyed by the TrafficReport field names.
inline nlohmann::ordered_json to_json(const TrafficReport& r) {
  nlohmann::ordered_json j;
  j["bytes_loaded"] = r.bytes_loaded;
  j["bytes_stored"] = r.bytes_stored;
  j["flops"] = r.flops;
  j["redundant_flops"] = r.redundant_flops;
  j["barriers"] = r.barriers;
  j["kernel_launches"] = r.kernel_launches;
  j["peak_scratch_bytes"] = r.peak_scratch_bytes;
  j["per_sample_grad_bytes_stored"] = r.per_sample_grad_bytes_stored;
  return j;
}

}  // namespace flashdp
