#pragma once

namespace refanim {

const char* version();

}  // namespace refanim
