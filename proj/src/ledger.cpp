#include "mesp/ledger.hpp"

#include <cmath>
#include <ostream>
#include <stdexcept>

namespace mesp {

const char* category_name(Category c) {
  switch (c) {
    case Category::checkpoint: return "checkpoint";
    case Category::intermediate: return "intermediate";
    case Category::h_projection: return "h_projection";
    case Category::gradient: return "gradient";
    case Category::parameter: return "parameter";
    case Category::logits: return "logits";
  }
  return "unknown";
}

void Ledger::note_peak() {
  if (live_ > peak_) {
    peak_ = live_;
    peak_seq_ = seq_;
    peak_by_cat_ = by_cat_;
  }
  if (live_ > step_peak_) step_peak_ = live_;
}

int64_t Ledger::alloc(int64_t id, int64_t bytes, Category cat, int32_t block) {
  if (bytes < 0) throw std::logic_error("ledger: negative byte count for id " + std::to_string(id));
  if (live_map_.count(id))
    throw std::logic_error("ledger: duplicate allocation for live id " + std::to_string(id));
  ++seq_;
  live_map_.emplace(id, LiveEntry{bytes, cat, block});
  live_ += bytes;
  total_alloc_ += bytes;
  by_cat_[category_name(cat)] += bytes;
  if (keep_trace_) events_.push_back({seq_, id, bytes, cat, block, Action::alloc});
  note_peak();
  return live_;
}

int64_t Ledger::release(int64_t id) {
  auto it = live_map_.find(id);
  if (it == live_map_.end())
    throw std::logic_error("ledger: release of unknown or already released id " +
                           std::to_string(id));
  ++seq_;
  const LiveEntry e = it->second;
  live_map_.erase(it);
  live_ -= e.bytes;
  total_release_ += e.bytes;
  by_cat_[category_name(e.category)] -= e.bytes;
  if (keep_trace_) events_.push_back({seq_, id, e.bytes, e.category, e.block, Action::release});
  return live_;
}

int64_t Ledger::live_bytes_for(Category cat) const {
  auto it = by_cat_.find(category_name(cat));
  return it == by_cat_.end() ? 0 : it->second;
}

void Ledger::export_trace(std::ostream& os) const {
  for (const AllocEvent& e : events_) {
    os << e.seq << '\t' << (e.action == Action::alloc ? "alloc" : "release") << '\t' << e.tensor_id
       << '\t' << e.bytes << '\t' << category_name(e.category);
    if (e.block >= 0) os << ':' << e.block;
    os << '\n';
  }
}

LedgerReport make_report(const Ledger& ledger) {
  LedgerReport r;
  r.peak_bytes = ledger.peak_bytes();
  r.peak_seq = ledger.peak_seq();
  r.live_bytes_end = ledger.live_bytes();
  r.live_by_category_at_peak = ledger.live_by_category_at_peak();
  return r;
}

double reduction_percent(int64_t a_peak_bytes, int64_t b_peak_bytes) {
  if (b_peak_bytes == 0) throw std::invalid_argument("reduction_percent: zero baseline peak");
  double pct = (1.0 - static_cast<double>(a_peak_bytes) / static_cast<double>(b_peak_bytes)) * 100.0;
  return std::round(pct * 10.0) / 10.0;
}

}  // namespace mesp
