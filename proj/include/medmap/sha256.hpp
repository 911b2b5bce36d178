#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace medmap {

// Incremental SHA-256 (FIPS 180-4). Used for parameter-freezing contracts and
// blob integrity checks in the checkpoint container.
class Sha256 {
  public:
    Sha256() { reset(); }

    void reset();
    void update(const void* data, std::size_t len);
    // Finalizes and returns the 64-char lowercase hex digest. The object must
    // be reset() before reuse.
    std::string hex_digest();

    static std::string of(const void* data, std::size_t len) {
        Sha256 h;
        h.update(data, len);
        return h.hex_digest();
    }
    static std::string of(const std::string& s) { return of(s.data(), s.size()); }

  private:
    void process_block(const std::uint8_t* block);

    std::uint32_t state_[8];
    std::uint64_t bit_count_ = 0;
    std::uint8_t buffer_[64];
    std::size_t buffer_len_ = 0;
};

}  // namespace medmap
