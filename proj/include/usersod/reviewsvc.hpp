#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "usersod/digger.hpp"

namespace httplib {
class Server;
}

namespace usersod::review {

/// HTTP front of a CorrectionQueue plus static hosting of the review UI.
class ReviewService {
  public:
    ReviewService(dig::CorrectionQueue& queue, std::optional<std::filesystem::path> static_dir = std::nullopt);
    ~ReviewService();
    ReviewService(const ReviewService&) = delete;
    ReviewService& operator=(const ReviewService&) = delete;

    /// Binds; port 0 picks a free port. Returns the bound port.
    int bind(const std::string& host, int port);
    /// Blocks until stop().
    void serve();
    void stop();
    bool running() const;

  private:
    void routes();

    dig::CorrectionQueue& queue_;
    std::unique_ptr<httplib::Server> server_;
};

} // namespace usersod::review
