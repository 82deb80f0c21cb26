#include "nng/random.hpp"

namespace nng {

std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

Rng::Rng(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

double Rng::normal() { return normal_(engine_); }

double Rng::uniform() { return uniform_(engine_); }

std::size_t Rng::index(std::size_t n)
{
    std::uniform_int_distribution<std::size_t> dist(0, n - 1);
    return dist(engine_);
}

double Rng::gamma(double shape, double rate)
{
    std::gamma_distribution<double> dist(shape, 1.0 / rate);
    return dist(engine_);
}

Rng Rng::split()
{
    ++children_;
    return Rng(splitmix64(seed_ ^ splitmix64(children_ * 0xd1b54a32d192ed03ULL)));
}

}  // namespace nng
