#pragma once

#include <iosfwd>
#include <string>

namespace haformer {

// Runs every registered invariant whose name contains `filter` (empty runs
// all), printing one status line per property. Returns 0 when everything
// that ran passed, 2 otherwise. Setting HAFORMER_CHECK_FAULT=<substring>
// corrupts the fixture of any matching property, so the failure path can be
// exercised end to end.
int run_checks(const std::string& filter, std::ostream& out);

}  // namespace haformer
