#pragma once

namespace latte {

const char* version();

}  // namespace latte
