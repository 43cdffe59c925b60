// SPDX-License-Identifier: Apache-2.0
#include "tzk/errors.hpp"

namespace tzk {

void throw_numeric(const std::string& where) {
    throw NumericError("non-finite value produced in " + where);
}

}  // namespace tzk
