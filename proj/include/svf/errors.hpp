#pragma once

#include <stdexcept>
#include <string>

namespace svf {

// Base of every error raised by the library. Each failure mode from the
// module contracts gets its own type so callers (and the CLI's exit-code
// mapping) can tell them apart.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define SVF_DEFINE_ERROR(Name)                                                 \
    class Name : public Error {                                                \
    public:                                                                    \
        explicit Name(const std::string& what) : Error(#Name ": " + what) {}   \
    }

SVF_DEFINE_ERROR(InvalidMatrix);
SVF_DEFINE_ERROR(ShapeError);
SVF_DEFINE_ERROR(IncompatibleExperts);
SVF_DEFINE_ERROR(ContextOverflow);
SVF_DEFINE_ERROR(AdapterMissing);
SVF_DEFINE_ERROR(CacheError);
SVF_DEFINE_ERROR(UnknownFamily);
SVF_DEFINE_ERROR(EmptySplit);
SVF_DEFINE_ERROR(PretrainBandError);
SVF_DEFINE_ERROR(Diverged);
SVF_DEFINE_ERROR(EmptyEval);
SVF_DEFINE_ERROR(ClassifierMissing);
SVF_DEFINE_ERROR(EmptyLibrary);
SVF_DEFINE_ERROR(RangeError);
SVF_DEFINE_ERROR(IncompatibleArchitecture);
SVF_DEFINE_ERROR(ConfigError);
SVF_DEFINE_ERROR(CheckpointError);

#undef SVF_DEFINE_ERROR

}  // namespace svf
