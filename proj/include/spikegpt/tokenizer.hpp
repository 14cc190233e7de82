#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace spikegpt {

// Byte-level character tokenizer built from a corpus. Id 0 is reserved for
// unknown bytes; observed bytes get ids 1..K in byte order, so encode/decode
// round-trips exactly over the observed alphabet.
class CharTokenizer {
 public:
  CharTokenizer() { to_id_.fill(0); }

  static CharTokenizer build(std::string_view corpus);

  int64_t vocab_size() const { return static_cast<int64_t>(to_byte_.size()) + 1; }

  std::vector<int32_t> encode(std::string_view text) const;
  std::string decode(const std::vector<int32_t>& ids) const;

  nlohmann::json to_json() const;
  static CharTokenizer from_json(const nlohmann::json& j);

 private:
  std::array<int32_t, 256> to_id_{};
  std::vector<uint8_t> to_byte_;  // index id-1 -> byte value
};

}  // namespace spikegpt
