// Copyright 2026 The mstar-lite Authors
// SPDX-License-Identifier: Apache-2.0
//
// Closed-form checks runnable from the command line without a test harness.

#pragma once

#include <ostream>

namespace mstar::selftest {

/// Prints one PASS/FAIL line per check; true when all pass.
bool run(std::ostream& out);

}  // namespace mstar::selftest
