#pragma once

#include <stdexcept>
#include <string>

namespace fedskel {

// Every failure raised by the library derives from Error; the C API maps the
// category onto a status code.
enum class ErrorKind {
    Dimension,
    Config,
    Topology,
    Protocol,
    Data,
    Usage,
    NonFinite,
    Grafting,
    Io,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

#define FEDSKEL_DEFINE_ERROR(Name, Kind)                                   \
    class Name : public Error {                                            \
    public:                                                                \
        explicit Name(const std::string& what) : Error(ErrorKind::Kind, what) {} \
    };

FEDSKEL_DEFINE_ERROR(DimensionError, Dimension)
FEDSKEL_DEFINE_ERROR(ConfigError, Config)
FEDSKEL_DEFINE_ERROR(TopologyError, Topology)
FEDSKEL_DEFINE_ERROR(ProtocolError, Protocol)
FEDSKEL_DEFINE_ERROR(DataError, Data)
FEDSKEL_DEFINE_ERROR(UsageError, Usage)
FEDSKEL_DEFINE_ERROR(NonFiniteError, NonFinite)
FEDSKEL_DEFINE_ERROR(GraftingError, Grafting)
FEDSKEL_DEFINE_ERROR(IoError, Io)

#undef FEDSKEL_DEFINE_ERROR

}  // namespace fedskel
