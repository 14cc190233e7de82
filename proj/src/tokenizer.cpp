#include "spikegpt/tokenizer.hpp"

#include <algorithm>

#include "spikegpt/errors.hpp"

namespace spikegpt {

CharTokenizer CharTokenizer::build(std::string_view corpus) {
  if (corpus.empty()) throw DataError("tokenizer: empty corpus");
  std::array<bool, 256> seen{};
  for (unsigned char c : corpus) seen[c] = true;
  CharTokenizer t;
  for (int b = 0; b < 256; ++b) {
    if (seen[b]) {
      t.to_byte_.push_back(static_cast<uint8_t>(b));
      t.to_id_[b] = static_cast<int32_t>(t.to_byte_.size());
    }
  }
  return t;
}

std::vector<int32_t> CharTokenizer::encode(std::string_view text) const {
  std::vector<int32_t> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(to_id_[c]);
  return ids;
}

std::string CharTokenizer::decode(const std::vector<int32_t>& ids) const {
  std::string out;
  out.reserve(ids.size());
  for (int32_t id : ids) {
    if (id < 0 || id >= vocab_size())
      throw VocabError("tokenizer: id " + std::to_string(id) + " outside vocabulary");
    out.push_back(id == 0 ? '?' : static_cast<char>(to_byte_[static_cast<size_t>(id - 1)]));
  }
  return out;
}

nlohmann::json CharTokenizer::to_json() const {
  nlohmann::json bytes = nlohmann::json::array();
  for (uint8_t b : to_byte_) bytes.push_back(static_cast<int>(b));
  return {{"kind", "char"}, {"bytes", bytes}};
}

CharTokenizer CharTokenizer::from_json(const nlohmann::json& j) {
  if (j.value("kind", "") != "char") throw DataError("tokenizer: unknown kind in checkpoint");
  CharTokenizer t;
  for (const auto& v : j.at("bytes")) {
    int b = v.get<int>();
    if (b < 0 || b > 255) throw DataError("tokenizer: byte value out of range");
    t.to_byte_.push_back(static_cast<uint8_t>(b));
    t.to_id_[static_cast<size_t>(b)] = static_cast<int32_t>(t.to_byte_.size());
  }
  return t;
}

}  // namespace spikegpt
