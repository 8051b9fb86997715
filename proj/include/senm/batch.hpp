#pragma once

#include <torch/torch.h>

#include <optional>
#include <string>

#include "senm/errors.hpp"

namespace senm {

enum class Domain { paired, source, target };

inline std::string to_string(Domain d) {
  switch (d) {
    case Domain::paired: return "paired";
    case Domain::source: return "source";
    case Domain::target: return "target";
  }
  return "?";
}

inline Domain domain_from_string(const std::string& s) {
  if (s == "paired") return Domain::paired;
  if (s == "source") return Domain::source;
  if (s == "target") return Domain::target;
  throw DataError("unknown domain tag '" + s + "'");
}

/// A batch from exactly one domain. Paired batches carry x and y, source
/// batches x only, target batches y only. `level` is an optional per-item
/// degradation level [N].
struct DomainBatch {
  std::optional<Domain> domain;
  torch::Tensor x;
  torch::Tensor y;
  torch::Tensor level;

  static DomainBatch paired(torch::Tensor x, torch::Tensor y, torch::Tensor level = {}) {
    return {Domain::paired, std::move(x), std::move(y), std::move(level)};
  }
  static DomainBatch source(torch::Tensor x) { return {Domain::source, std::move(x), {}, {}}; }
  static DomainBatch target(torch::Tensor y, torch::Tensor level = {}) {
    return {Domain::target, {}, std::move(y), std::move(level)};
  }

  std::optional<torch::Tensor> level_opt() const {
    if (level.defined()) return level;
    return std::nullopt;
  }

  void validate() const {
    if (!domain) throw ContractViolation("DomainBatch: batch carries no domain tag");
    switch (*domain) {
      case Domain::paired:
        if (!x.defined() || !y.defined()) throw ContractViolation("DomainBatch: paired batch needs both x and y");
        if (x.sizes() != y.sizes()) throw ContractViolation("DomainBatch: paired x and y shapes differ");
        break;
      case Domain::source:
        if (!x.defined() || y.defined()) throw ContractViolation("DomainBatch: source batch carries x only");
        break;
      case Domain::target:
        if (!y.defined() || x.defined()) throw ContractViolation("DomainBatch: target batch carries y only");
        break;
    }
  }
};

}  // namespace senm
