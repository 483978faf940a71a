// Copyright 2026 The salign Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace salign {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration, data spec, or batching limits.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Tensor shapes that do not fit together.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// An operation received nothing to work on (zero frames, fully masked sequence, ...).
class EmptyInputError : public Error {
 public:
  using Error::Error;
};

/// CTC target cannot be aligned to the given number of frames.
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

/// Manifest, vocabulary, or frame-file ingestion failure.
class IngestionError : public Error {
 public:
  using Error::Error;
};

/// Checkpoints built from different model configurations.
class IncompatibleError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss during training.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace salign
