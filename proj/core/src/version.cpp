#include "refanim/version.hpp"

namespace refanim {

const char* version() { return "0.1.0"; }

}  // namespace refanim
