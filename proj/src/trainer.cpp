#include "mesp/trainer.hpp"

#include <fstream>

namespace mesp {

Corpus load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_corpus: cannot open '" + path + "'");
  Corpus c;
  c.bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  if (c.bytes.empty()) throw std::runtime_error("load_corpus: '" + path + "' is empty");
  return c;
}

Batch sample_batch(const Corpus& corpus, int64_t batch, int64_t seq, Rng& rng) {
  if (batch < 1 || seq < 1) throw std::invalid_argument("sample_batch: batch and seq must be >= 1");
  const int64_t size = static_cast<int64_t>(corpus.bytes.size());
  if (size < seq + 1)
    throw std::invalid_argument("sample_batch: corpus of " + std::to_string(size) +
                                " bytes cannot fill a window of " + std::to_string(seq + 1));
  Batch b;
  b.inputs = Tensor<int32_t>(Shape{batch, seq});
  b.targets = Tensor<int32_t>(Shape{batch, seq});
  for (int64_t i = 0; i < batch; ++i) {
    int64_t start = rng.uniform_int(0, size - seq - 1);
    for (int64_t t = 0; t < seq; ++t) {
      b.inputs.at(i, t) = static_cast<int32_t>(corpus.bytes[static_cast<size_t>(start + t)]);
      b.targets.at(i, t) = static_cast<int32_t>(corpus.bytes[static_cast<size_t>(start + t + 1)]);
    }
  }
  return b;
}

}  // namespace mesp
