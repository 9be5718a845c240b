#pragma once
// Memory ledger: an ordered alloc/free event log with live-byte accounting
// and peak extraction. The ledger counts modeled payload bytes only
// (shape x element width); allocator slack, alignment and framework
// overhead are deliberately out of scope. Strategies route the lifecycle
// of every modeled tensor (checkpoints, per-block intermediates, LoRA h
// projections, gradient buffers, parameters, logits) through one ledger
// session, so peaks and per-tag residency can be compared across
// strategies on equal footing.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

namespace mesp {

enum class Category : uint8_t {
  checkpoint,
  intermediate,
  h_projection,
  gradient,
  parameter,
  logits,
};

const char* category_name(Category c);

enum class Action : uint8_t { alloc, release };

struct AllocEvent {
  int64_t seq = 0;
  int64_t tensor_id = 0;
  int64_t bytes = 0;
  Category category = Category::intermediate;
  int32_t block = -1;  // block index where applicable, -1 otherwise
  Action action = Action::alloc;
};

class Ledger {
 public:
  // keep_trace retains the full event list for export and replay checks.
  explicit Ledger(bool keep_trace = false) : keep_trace_(keep_trace) {}

  // Record an allocation of `bytes` for tensor `id`. Returns live bytes.
  int64_t alloc(int64_t id, int64_t bytes, Category cat, int32_t block = -1);
  // Record the matching release. Unknown or doubly released ids are hard
  // errors naming the offending id: silent mismatches would corrupt every
  // downstream peak claim.
  int64_t release(int64_t id);

  int64_t live_bytes() const { return live_; }
  int64_t peak_bytes() const { return peak_; }
  int64_t peak_seq() const { return peak_seq_; }
  int64_t total_alloc_bytes() const { return total_alloc_; }
  int64_t total_release_bytes() const { return total_release_; }
  int64_t next_seq() const { return seq_; }

  // Live bytes per category at the historical peak.
  const std::map<std::string, int64_t>& live_by_category_at_peak() const { return peak_by_cat_; }
  int64_t live_bytes_for(Category cat) const;

  // Step scoping: step_peak is the max live seen since the last step_begin.
  void step_begin() { step_peak_ = live_; }
  int64_t step_peak_bytes() const { return step_peak_; }

  const std::vector<AllocEvent>& events() const { return events_; }
  bool keeps_trace() const { return keep_trace_; }

  // One record per line: seq, action, id, bytes, tag. Tab separated; the
  // tag is "category" or "category:block" when a block index is attached.
  void export_trace(std::ostream& os) const;

 private:
  struct LiveEntry {
    int64_t bytes;
    Category category;
    int32_t block;
  };

  bool keep_trace_;
  int64_t seq_ = 0;
  int64_t live_ = 0;
  int64_t peak_ = 0;
  int64_t peak_seq_ = 0;
  int64_t step_peak_ = 0;
  int64_t total_alloc_ = 0;
  int64_t total_release_ = 0;
  std::unordered_map<int64_t, LiveEntry> live_map_;
  std::map<std::string, int64_t> by_cat_;       // running live bytes per category name
  std::map<std::string, int64_t> peak_by_cat_;  // snapshot of by_cat_ at peak
  std::vector<AllocEvent> events_;

  void note_peak();
};

struct LedgerReport {
  int64_t peak_bytes = 0;
  int64_t peak_seq = 0;
  int64_t live_bytes_end = 0;
  std::map<std::string, int64_t> live_by_category_at_peak;
};

LedgerReport make_report(const Ledger& ledger);

// Percentage reduction of a relative to baseline b: (1 - a/b) * 100,
// rounded to one decimal. Negative when a exceeds the baseline.
double reduction_percent(int64_t a_peak_bytes, int64_t b_peak_bytes);

}  // namespace mesp
