// Copyright 2026 The moe-offload Authors
// SPDX-License-Identifier: Apache-2.0

#include "moe/cli.hpp"

int main(int argc, char** argv) { return moe::cli::run(argc, argv); }
