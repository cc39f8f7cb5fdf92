#include "latte/version.hpp"

namespace latte {

const char* version() { return "0.1.0"; }

}  // namespace latte
