#pragma once

#include <string>

namespace tidpo {

// Shortest decimal form that parses back to the identical double (%.17g is
// always sufficient; we trim to the shortest width that round-trips).
// Used for every number we write to CSV so reruns are byte-identical.
std::string format_double(double v);

// Write-to-temp-then-rename so partially written files never appear under
// the final name.
void atomic_write_file(const std::string& path, const std::string& content);

std::string read_file(const std::string& path);

}  // namespace tidpo
