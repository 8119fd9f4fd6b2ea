#pragma once
// Shared plumbing for parameter structs. Every block params type exposes
//   using value_type = V;
//   template <class U> XT<U> like() const;        // structure clone, empty leaves
//   template <class F> void visit(F&&) [const];   // deterministic (name, leaf) walk
// so eager float inference, double-precision finite-difference probes, and
// tape variables all run the one templated definition of the block math.

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

namespace haformer {

// Rebuilds a structurally identical params struct with each leaf produced by
// leaf(name, src_leaf). Visit order is the struct's own, so source and
// destination walk in lockstep.
template <class U, template <class> class P, class V, class F>
P<U> rebind_params(const P<V>& src, F&& leaf) {
  P<U> dst = src.template like<U>();
  std::vector<U*> slots;
  dst.visit([&](const std::string&, U& t) { slots.push_back(&t); });
  std::size_t i = 0;
  src.visit([&](const std::string& name, const V& t) { *slots[i++] = leaf(name, t); });
  return dst;
}

// Flattens a params struct into (prefix + name, leaf copy) pairs.
template <class P>
std::vector<std::pair<std::string, typename P::value_type>> collect_params(
    const P& p, const std::string& prefix = "") {
  using V = typename P::value_type;
  std::vector<std::pair<std::string, V>> out;
  p.visit([&](const std::string& name, const V& t) { out.emplace_back(prefix + name, t); });
  return out;
}

// Total element count across all leaves; the enumeration side of the
// parameter-accounting checks.
template <class P>
std::int64_t param_count(const P& p) {
  std::int64_t n = 0;
  p.visit([&](const std::string&, const typename P::value_type& t) { n += t.numel(); });
  return n;
}

}  // namespace haformer
