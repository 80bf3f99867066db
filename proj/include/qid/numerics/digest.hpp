#pragma once

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "qid/numerics/tensor.hpp"

namespace qid {

/// SHA-256 over (name, shape, raw values) of each tensor, in order. Used to
/// audit that frozen weights are untouched by training.
template <std::floating_point S>
std::string digest(const std::vector<std::pair<std::string, Tensor<S>>>& tensors) {
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw Error("digest: SHA-256 unavailable");
  }
  for (const auto& [name, t] : tensors) {
    EVP_DigestUpdate(ctx, name.data(), name.size());
    for (std::size_t d : t.shape()) {
      const std::uint64_t dim = d;
      EVP_DigestUpdate(ctx, &dim, sizeof(dim));
    }
    EVP_DigestUpdate(ctx, t.data().data(), t.numel() * sizeof(S));
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> out{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, out.data(), &len);
  EVP_MD_CTX_free(ctx);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex.push_back(kHex[out[i] >> 4]);
    hex.push_back(kHex[out[i] & 0xF]);
  }
  return hex;
}

}  // namespace qid
