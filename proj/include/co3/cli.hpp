#pragma once

// Command-line front end. Every command writes <command>.manifest.json into
// its output directory.

#include <iosfwd>
#include <string>
#include <vector>

namespace co3 {

// args excludes the program name. Errors are reported on `err` as
// "error\t<CODE>\t<message>" and give a nonzero return.
int run_cli(const std::vector<std::string>& args, std::istream& in, std::ostream& out, std::ostream& err);

}  // namespace co3
