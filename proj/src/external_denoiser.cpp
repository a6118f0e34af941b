#include "avedit/editor.hpp"
#include "avedit/error.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <sys/socket.h>
#include <sys/un.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

namespace avedit {

// Body layout (little-endian, host order on all supported targets):
//   u64 request_id | u8 variant | f32 t | tensor latent | tensor image | u32 n | n bytes instruction
// tensor = u32 ndim | ndim x i64 dims | prod(dims) x f32, row-major; ndim 0 marks an absent tensor.
// Responses: u64 request_id | u8 variant | f32 t | tensor eps.

namespace {

constexpr uint32_t kMaxFrame = 1u << 30;

class Writer {
 public:
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const uint8_t*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void put_tensor(const torch::Tensor& t) {
    if (!t.defined()) {
      put<uint32_t>(0);
      return;
    }
    auto c = t.detach().to(torch::kFloat32).contiguous();
    put<uint32_t>(static_cast<uint32_t>(c.dim()));
    for (auto d : c.sizes()) put<int64_t>(d);
    const auto* p = reinterpret_cast<const uint8_t*>(c.data_ptr<float>());
    buf_.insert(buf_.end(), p, p + c.numel() * sizeof(float));
  }
  void put_string(const std::string& s) {
    put<uint32_t>(static_cast<uint32_t>(s.size()));
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  std::vector<uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(const std::vector<uint8_t>& b) : b_(b) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  torch::Tensor get_tensor() {
    const auto ndim = get<uint32_t>();
    if (ndim == 0) return {};
    if (ndim > 8) throw ProtocolError("tensor rank " + std::to_string(ndim) + " too large");
    std::vector<int64_t> dims(ndim);
    int64_t n = 1;
    for (auto& d : dims) {
      d = get<int64_t>();
      if (d < 0 || d > (1 << 24)) throw ProtocolError("bad tensor dimension");
      n *= d;
    }
    need(static_cast<size_t>(n) * sizeof(float));
    auto t = torch::empty(dims, torch::kFloat32);
    std::memcpy(t.data_ptr<float>(), b_.data() + pos_, static_cast<size_t>(n) * sizeof(float));
    pos_ += static_cast<size_t>(n) * sizeof(float);
    return t;
  }
  std::string get_string() {
    const auto n = get<uint32_t>();
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void finish() const {
    if (pos_ != b_.size()) throw ProtocolError("trailing bytes in message");
  }

 private:
  void need(size_t n) const {
    if (pos_ + n > b_.size()) throw ProtocolError("truncated message");
  }
  const std::vector<uint8_t>& b_;
  size_t pos_ = 0;
};

Variant variant_from(uint8_t tag) {
  if (tag > 2) throw ProtocolError("unknown variant tag " + std::to_string(tag));
  return static_cast<Variant>(tag);
}

void write_all(int fd, const uint8_t* p, size_t n) {
  while (n > 0) {
    const ssize_t k = ::send(fd, p, n, MSG_NOSIGNAL);
    if (k < 0) {
      if (errno == EINTR) continue;
      throw IoError(std::string("socket write failed: ") + std::strerror(errno));
    }
    p += k;
    n -= static_cast<size_t>(k);
  }
}

// Returns bytes read; < n only on EOF.
size_t read_all(int fd, uint8_t* p, size_t n) {
  size_t got = 0;
  while (got < n) {
    const ssize_t k = ::read(fd, p + got, n - got);
    if (k < 0) {
      if (errno == EINTR) continue;
      throw IoError(std::string("socket read failed: ") + std::strerror(errno));
    }
    if (k == 0) break;
    got += static_cast<size_t>(k);
  }
  return got;
}

}  // namespace

std::vector<uint8_t> encode_request(const DenoiseRequest& r) {
  Writer w;
  w.put<uint64_t>(r.request_id);
  w.put<uint8_t>(static_cast<uint8_t>(r.variant));
  w.put<float>(r.t);
  w.put_tensor(r.latent);
  w.put_tensor(r.image);
  w.put_string(r.instruction);
  return w.take();
}

DenoiseRequest decode_request(const std::vector<uint8_t>& body) {
  Reader rd(body);
  DenoiseRequest r;
  r.request_id = rd.get<uint64_t>();
  r.variant = variant_from(rd.get<uint8_t>());
  r.t = rd.get<float>();
  r.latent = rd.get_tensor();
  r.image = rd.get_tensor();
  r.instruction = rd.get_string();
  rd.finish();
  if (!r.latent.defined()) throw ProtocolError("request without latent");
  return r;
}

std::vector<uint8_t> encode_response(const DenoiseResponse& r) {
  Writer w;
  w.put<uint64_t>(r.request_id);
  w.put<uint8_t>(static_cast<uint8_t>(r.variant));
  w.put<float>(r.t);
  w.put_tensor(r.eps);
  return w.take();
}

DenoiseResponse decode_response(const std::vector<uint8_t>& body) {
  Reader rd(body);
  DenoiseResponse r;
  r.request_id = rd.get<uint64_t>();
  r.variant = variant_from(rd.get<uint8_t>());
  r.t = rd.get<float>();
  r.eps = rd.get_tensor();
  rd.finish();
  if (!r.eps.defined()) throw ProtocolError("response without eps");
  return r;
}

void write_frame(int fd, const std::vector<uint8_t>& body) {
  if (body.size() > kMaxFrame) throw ProtocolError("message too large");
  const uint32_t len = static_cast<uint32_t>(body.size());
  write_all(fd, reinterpret_cast<const uint8_t*>(&len), sizeof(len));
  write_all(fd, body.data(), body.size());
}

bool read_frame(int fd, std::vector<uint8_t>& body) {
  uint32_t len = 0;
  const size_t got = read_all(fd, reinterpret_cast<uint8_t*>(&len), sizeof(len));
  if (got == 0) return false;
  if (got < sizeof(len)) throw ProtocolError("connection closed inside a length prefix");
  if (len > kMaxFrame) throw ProtocolError("message too large");
  body.resize(len);
  if (read_all(fd, body.data(), len) != len) throw ProtocolError("connection closed inside a message");
  return true;
}

void serve_denoiser(int fd, Denoiser& denoiser) {
  std::vector<uint8_t> body;
  while (read_frame(fd, body)) {
    const auto req = decode_request(body);
    DenoiseResponse resp;
    resp.request_id = req.request_id;
    resp.variant = req.variant;
    resp.t = req.t;
    const auto image = req.image.defined() ? req.image : torch::zeros_like(req.latent);
    resp.eps = denoiser.predict(req.latent, req.t, req.variant, image, req.instruction);
    write_frame(fd, encode_response(resp));
  }
}

ExternalDenoiser::ExternalDenoiser(std::string address) : address_(std::move(address)) {
  if (address_.empty()) throw ConfigError("external editor address is empty (set " + std::string(kEditorSocketEnv) + ")");
}

ExternalDenoiser::~ExternalDenoiser() {
  if (fd_ >= 0) ::close(fd_);
}

void ExternalDenoiser::connect() {
  if (address_.rfind("unix:", 0) == 0) {
    const std::string path = address_.substr(5);
    sockaddr_un addr{};
    if (path.size() >= sizeof(addr.sun_path)) throw ConfigError("socket path too long: " + path);
    addr.sun_family = AF_UNIX;
    std::strncpy(addr.sun_path, path.c_str(), sizeof(addr.sun_path) - 1);
    fd_ = ::socket(AF_UNIX, SOCK_STREAM, 0);
    if (fd_ < 0) throw IoError("socket() failed");
    if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      ::close(fd_);
      fd_ = -1;
      throw IoError("cannot connect to editor at " + address_ + ": " + std::strerror(errno));
    }
    return;
  }
  const auto colon = address_.rfind(':');
  if (colon == std::string::npos) throw ConfigError("editor address must be unix:/path or host:port, got " + address_);
  const std::string host = address_.substr(0, colon);
  const std::string port = address_.substr(colon + 1);
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), port.c_str(), &hints, &res) != 0 || res == nullptr) {
    throw IoError("cannot resolve editor address " + address_);
  }
  for (auto* ai = res; ai; ai = ai->ai_next) {
    fd_ = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd_ < 0) continue;
    if (::connect(fd_, ai->ai_addr, ai->ai_addrlen) == 0) break;
    ::close(fd_);
    fd_ = -1;
  }
  ::freeaddrinfo(res);
  if (fd_ < 0) throw IoError("cannot connect to editor at " + address_);
}

torch::Tensor ExternalDenoiser::predict(const torch::Tensor& z_t, double t, Variant variant,
                                        const torch::Tensor& image_cond, const std::string& instruction) {
  std::lock_guard<std::mutex> lock(mutex_);
  if (fd_ < 0) connect();
  DenoiseRequest req;
  req.request_id = next_id_++;
  req.variant = variant;
  req.t = static_cast<float>(t);
  req.latent = z_t;
  if (variant != Variant::Uncond) req.image = image_cond;
  if (variant == Variant::Full) req.instruction = instruction;
  write_frame(fd_, encode_request(req));
  std::vector<uint8_t> body;
  if (!read_frame(fd_, body)) throw ProtocolError("editor closed the connection");
  const auto resp = decode_response(body);
  if (resp.request_id != req.request_id) throw ProtocolError("response id does not match request");
  if (!resp.eps.sizes().equals(z_t.sizes())) throw DimensionError("editor returned eps of the wrong shape");
  return resp.eps.to(z_t.dtype());
}

}  // namespace avedit
