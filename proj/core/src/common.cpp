#include "isodream/common.hpp"

#include <sstream>

namespace isodream::detail {

[[noreturn]] void contract_fail(const char* expr, const char* file, int line,
                                const std::string& msg) {
  std::ostringstream os;
  os << "contract violation: " << msg << " [" << expr << " at " << file << ":"
     << line << "]";
  throw ContractError(os.str());
}

}  // namespace isodream::detail
